#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "patchfit/decoder.hpp"
#include "patchfit/losses.hpp"
#include "patchfit/rng.hpp"

using namespace patchfit;

namespace {

struct Batch {
    std::vector<Vec2d> uv;
    std::vector<int> patch_of;
};

Batch make_batch(const AtlasArch& arch, int per_patch, Rng& rng) {
    Batch b;
    for (int k = 0; k < arch.patch_count; ++k)
        for (int i = 0; i < per_patch; ++i) {
            b.uv.push_back({rng.uniform(), rng.uniform()});
            b.patch_of.push_back(k);
        }
    return b;
}

template <class S>
struct Forward {
    std::vector<Vec3<S>> pos;
    std::vector<Vec3<S>> nrm;
    std::vector<Fff<S>> forms;
    std::vector<S> areas;  // per patch
};

template <class S>
Forward<S> run_forward(const AtlasArch& arch, std::span<const S> params, const Batch& b) {
    Forward<S> f;
    std::vector<std::vector<Fff<S>>> by_patch(static_cast<size_t>(arch.patch_count));
    for (size_t i = 0; i < b.uv.size(); ++i) {
        auto jet = decode_jet<S>(arch, params, b.patch_of[i], b.uv[i].u, b.uv[i].v);
        f.pos.push_back(jet.p);
        f.nrm.push_back(analytic_normal(jet.ju, jet.jv));
        Fff<S> ff = fundamental_form(jet.ju, jet.jv);
        f.forms.push_back(ff);
        by_patch[static_cast<size_t>(b.patch_of[i])].push_back(ff);
    }
    for (int k = 0; k < arch.patch_count; ++k)
        f.areas.push_back(patch_area<S>(by_patch[static_cast<size_t>(k)]));
    return f;
}

void check_grad(const std::vector<double>& g, const std::vector<double>& g_fd) {
    REQUIRE(g.size() == g_fd.size());
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        num = std::max(num, std::abs(g[i] - g_fd[i]));
        den = std::max(den, std::abs(g_fd[i]));
    }
    CHECK(num / std::max(den, 1e-8) < 1e-4);
}

PredictedCloud cloud_from(const std::vector<Vec3d>& pos, const std::vector<Vec3d>& nrm,
                          const std::vector<int>& patch_of) {
    PredictedCloud c;
    for (size_t i = 0; i < pos.size(); ++i) {
        PredictedPoint p;
        p.position = pos[i];
        p.normal = nrm[i];
        p.patch_id = patch_of[i];
        c.points.push_back(p);
    }
    return c;
}

GroundTruthCloud plane_gt(int side, double gt_area = 1.0) {
    GroundTruthCloud gt;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j) {
            gt.points.push_back({-0.5 + i / (side - 1.0), -0.5 + j / (side - 1.0), 0.0});
            gt.normals.push_back({0, 0, 1});
        }
    gt.area = gt_area;
    return gt;
}

}  // namespace

TEST_CASE("chamfer: fixed values, brute force, rigid invariance") {
    GroundTruthCloud gt;
    gt.points = {{1, 0, 0}};
    gt.normals = {{0, 0, 1}};
    gt.area = 1.0;
    PredictedCloud pred = cloud_from({{0, 0, 0}}, {{0, 0, 1}}, {0});
    CHECK(chamfer(pred, gt) == doctest::Approx(2.0).epsilon(1e-12));

    PredictedCloud same = cloud_from(gt.points, gt.normals, {0});
    CHECK(chamfer(same, gt) == doctest::Approx(0.0).epsilon(1e-15));

    Rng rng(11);
    GroundTruthCloud big;
    for (int j = 0; j < 40; ++j) {
        big.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        big.normals.push_back({0, 0, 1});
    }
    big.area = 1.0;
    std::vector<Vec3d> pp;
    for (int i = 0; i < 30; ++i)
        pp.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    PredictedCloud p30 = cloud_from(pp, std::vector<Vec3d>(30, {0, 0, 1}), std::vector<int>(30, 0));

    double expect = 0.0;
    for (const Vec3d& p : pp) {
        double best = dist2(p, big.points[0]);
        for (const Vec3d& q : big.points) best = std::min(best, dist2(p, q));
        expect += best / 30.0;
    }
    for (const Vec3d& q : big.points) {
        double best = dist2(q, pp[0]);
        for (const Vec3d& p : pp) best = std::min(best, dist2(q, p));
        expect += best / 40.0;
    }
    CHECK(chamfer(p30, big) == doctest::Approx(expect).epsilon(1e-12));

    // rotate both clouds by the same rigid motion
    double ca = std::cos(0.9), sa = std::sin(0.9);
    auto rigid = [&](const Vec3d& p) {
        return Vec3d{ca * p.x - sa * p.z + 2, p.y - 1, sa * p.x + ca * p.z + 3};
    };
    GroundTruthCloud big_r = big;
    for (auto& q : big_r.points) q = rigid(q);
    PredictedCloud p30_r = p30;
    for (auto& p : p30_r.points) p.position = rigid(p.position);
    CHECK(chamfer(p30_r, big_r) == doctest::Approx(chamfer(p30, big)).epsilon(1e-10));

    CHECK_THROWS_AS(chamfer(PredictedCloud{}, gt), LossError);
}

TEST_CASE("distortion: constants, hand case, reimplementation oracle") {
    std::vector<Fffd> forms(10, Fffd{2.0, 0.3, 5.0});
    std::vector<int> patch_of(10, 0);
    std::vector<double> areas = {1.7};
    auto [le, lg] = distortion<double>(forms, patch_of, areas);
    CHECK(le == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lg == doctest::Approx(0.0).epsilon(1e-15));

    std::vector<Fffd> two = {{1.0, 0.0, 1.0}, {3.0, 0.0, 1.0}};
    std::vector<int> po2 = {0, 0};
    std::vector<double> a1 = {1.0};
    auto [le2, lg2] = distortion<double>(two, po2, a1);
    CHECK(le2 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(lg2 == doctest::Approx(0.0).epsilon(1e-15));

    Rng rng(12);
    std::vector<Fffd> rf;
    std::vector<int> rp;
    for (int i = 0; i < 50; ++i) {
        rf.push_back({rng.uniform(0.5, 2), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 2)});
        rp.push_back(static_cast<int>(rng.below(2)));
    }
    std::vector<double> ra = {0.7, 1.9};
    double mu_e = 0, mu_g = 0;
    for (auto& f : rf) mu_e += f.E / 50.0, mu_g += f.G / 50.0;
    double ee = 0, eg = 0;
    for (int i = 0; i < 50; ++i) {
        double a = ra[static_cast<size_t>(rp[static_cast<size_t>(i)])];
        ee += (rf[static_cast<size_t>(i)].E - mu_e) * (rf[static_cast<size_t>(i)].E - mu_e) / (a * a) / 50.0;
        eg += (rf[static_cast<size_t>(i)].G - mu_g) * (rf[static_cast<size_t>(i)].G - mu_g) / (a * a) / 50.0;
    }
    auto [lr, gr] = distortion<double>(rf, rp, ra);
    CHECK(lr == doctest::Approx(ee).epsilon(1e-12));
    CHECK(gr == doctest::Approx(eg).epsilon(1e-12));

    std::vector<double> bad = {0.0};
    CHECK_THROWS_AS(distortion<double>(two, po2, bad), LossError);
    CHECK_THROWS_AS(skew<double>(two, po2, bad), LossError);
}

TEST_CASE("skew and overlap fixed values") {
    std::vector<Fffd> forms = {{1.0, 0.0, 1.0}, {1.0, 0.0, 2.0}};
    std::vector<int> po = {0, 0};
    std::vector<double> a = {3.0};
    CHECK(skew<double>(forms, po, a) == doctest::Approx(0.0).epsilon(1e-15));

    std::vector<Fffd> f2 = {{1.0, 2.0, 1.0}};
    std::vector<int> po1 = {0};
    std::vector<double> a4 = {4.0};
    CHECK(skew<double>(f2, po1, a4) == doctest::Approx(0.25).epsilon(1e-15));

    std::vector<double> small = {0.3, 0.5};
    CHECK(overlap<double>(small, 1.0) == doctest::Approx(0.0).epsilon(1e-15));
    std::vector<double> large = {0.7, 0.8};
    CHECK(overlap<double>(large, 1.0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK_THROWS_AS(overlap<double>(large, 0.0), LossError);
}

TEST_CASE("surface consistency: coplanar zero, orthogonal one, crossing positive") {
    GroundTruthCloud gt = plane_gt(20);
    ConsistencyConfig cfg;

    std::vector<Vec3d> pos;
    std::vector<int> po;
    for (int k = 0; k < 2; ++k)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
                pos.push_back({-0.45 + 0.9 * i / 5.0 + 0.01 * k, -0.45 + 0.9 * j / 5.0, 0.0});
                po.push_back(k);
            }
    std::vector<Vec3d> up(pos.size(), Vec3d{0, 0, 1});
    PredictedCloud flat = cloud_from(pos, up, po);
    CHECK(surface_consistency(flat, gt, cfg) == doctest::Approx(0.0).epsilon(1e-12));

    std::vector<Vec3d> sideways(pos.size(), Vec3d{1, 0, 0});
    PredictedCloud ortho = cloud_from(pos, sideways, po);
    CHECK(surface_consistency(ortho, gt, cfg) == doctest::Approx(1.0).epsilon(1e-12));

    // two planes crossing at 60 degrees about the y axis
    double c60 = 0.5, s60 = std::sqrt(3.0) / 2.0;
    std::vector<Vec3d> xpos;
    std::vector<Vec3d> xnrm;
    std::vector<int> xpo;
    GroundTruthCloud xgt;
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 12; ++j) {
            double t = -0.5 + i / 11.0, y = -0.5 + j / 11.0;
            xpos.push_back({t, y, 0});
            xnrm.push_back({0, 0, 1});
            xpo.push_back(0);
            xpos.push_back({t * c60, y, t * s60});
            xnrm.push_back({-s60, 0, c60});
            xpo.push_back(1);
        }
    xgt.points = xpos;
    xgt.normals = xnrm;
    xgt.area = 2.0;
    PredictedCloud crossing = cloud_from(xpos, xnrm, xpo);
    double l_cross = surface_consistency(crossing, xgt, cfg);
    CHECK(l_cross > 0.01);
    CHECK(l_cross <= 1.0);

    cfg.normal_mode = NormalMode::Approximate;
    CHECK(surface_consistency(flat, gt, cfg) == doctest::Approx(0.0).epsilon(1e-12));
    double l_cross_ap = surface_consistency(crossing, xgt, cfg);
    CHECK(l_cross_ap > 0.01);
    CHECK(l_cross_ap <= 1.0);
}

TEST_CASE("stitching: zero, hand case, brute force, similarity scaling") {
    // identical sample sets in both patches: every margin point has a
    // coincident other-patch sample
    std::vector<Vec3d> samples;
    std::vector<int> sp;
    Rng rng(13);
    for (int i = 0; i < 20; ++i) {
        Vec3d p{rng.uniform(), rng.uniform(), rng.uniform()};
        samples.push_back(p);
        sp.push_back(0);
        samples.push_back(p);
        sp.push_back(1);
    }
    std::vector<Vec3d> margins = {samples[0], samples[1]};
    std::vector<int> mp = {0, 1};
    auto plan = plan_stitching(margins, mp, samples, sp, 2);
    CHECK(stitching_eval<double>(std::span<const Vec3d>(margins),
                                 std::span<const Vec3d>(samples), plan) ==
          doctest::Approx(0.0).epsilon(1e-15));

    std::vector<Vec3d> s2 = {{0, 0, 0}, {0.1, 0, 0}};
    std::vector<int> sp2 = {0, 1};
    std::vector<Vec3d> m2 = s2;
    std::vector<int> mp2 = {0, 1};
    auto plan2 = plan_stitching(m2, mp2, s2, sp2, 2);
    CHECK(stitching_eval<double>(std::span<const Vec3d>(m2), std::span<const Vec3d>(s2), plan2) ==
          doctest::Approx(0.02).epsilon(1e-14));

    // 3 patches, random clouds, direct reimplementation
    std::vector<Vec3d> s3;
    std::vector<int> sp3;
    for (int i = 0; i < 90; ++i) {
        s3.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        sp3.push_back(i % 3);
    }
    std::vector<Vec3d> m3;
    std::vector<int> mp3;
    for (int i = 0; i < 30; ++i) {
        m3.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        mp3.push_back(i % 3);
    }
    auto plan3 = plan_stitching(m3, mp3, s3, sp3, 3);
    double got = stitching_eval<double>(std::span<const Vec3d>(m3), std::span<const Vec3d>(s3), plan3);
    std::vector<int> count(3, 0);
    for (int k : mp3) ++count[static_cast<size_t>(k)];
    double expect = 0.0;
    for (size_t i = 0; i < m3.size(); ++i) {
        double best = -1;
        for (size_t j = 0; j < s3.size(); ++j) {
            if (sp3[j] == mp3[i]) continue;
            double d2 = dist2(m3[i], s3[j]);
            if (best < 0 || d2 < best) best = d2;
        }
        expect += best / count[static_cast<size_t>(mp3[i])];
    }
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));

    // translation invariance and s^2 scaling
    double s = 2.5;
    Vec3d t{1, -2, 3};
    std::vector<Vec3d> m3s, s3s;
    for (auto& p : m3) m3s.push_back(p * s + t);
    for (auto& p : s3) s3s.push_back(p * s + t);
    auto plan3s = plan_stitching(m3s, mp3, s3s, sp3, 3);
    double scaled = stitching_eval<double>(std::span<const Vec3d>(m3s), std::span<const Vec3d>(s3s), plan3s);
    CHECK(scaled == doctest::Approx(s * s * got).epsilon(1e-10));

    CHECK_THROWS_AS(plan_stitching(m2, mp2, s2, sp2, 1), LossError);
    std::vector<int> all0 = {0, 0};
    CHECK_THROWS_AS(plan_stitching(m2, mp2, s2, all0, 2), LossError);
    auto bad_plan = plan2;
    bad_plan.margin_patch = {0, 0};
    CHECK_THROWS_AS(stitching_eval<double>(std::span<const Vec3d>(m2), std::span<const Vec3d>(s2), bad_plan),
                    LossError);
}

TEST_CASE("total_loss combination") {
    LossWeights w;  // defaults
    auto b = total_loss(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, w);
    CHECK(b.total == doctest::Approx(1.0 + 0.001 * 2 + 0.001 * 3 + 0.001 * 4 + 0.1 * 5 +
                                     0.001 * 6 + 0.001 * 7).epsilon(1e-15));
    CHECK(b.chd == 1.0);
    CHECK(b.l_st == 7.0);

    LossWeights zero{0, 0, 0, 0, 0, 0};
    CHECK(total_loss(3.5, 9, 9, 9, 9, 9, 9, zero).total == 3.5);
}

// ---- finite-difference gradient checks -------------------------------------

namespace {

struct Fixture {
    AtlasArch arch{2, 8, 0};
    Atlas atlas;
    Batch batch;
    GroundTruthCloud gt;

    Fixture() {
        Rng rng(1);
        atlas = init_atlas(arch, rng);
        // scale the weights out of the near-linear regime so the patches are
        // genuinely curved and neighborhood covariances keep healthy eigen gaps
        for (double& p : atlas.params) p *= 2.5;
        batch = make_batch(arch, 25, rng);
        for (int i = 0; i < 30; ++i) {
            Vec3d n{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
            gt.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
            gt.normals.push_back(normalized(n));
        }
        gt.area = 1.0;
    }
};

}  // namespace

TEST_CASE("gradients match finite differences: chamfer") {
    Fixture fx;
    auto base = run_forward<double>(fx.arch, fx.atlas.params, fx.batch);
    KdTree gt_tree(fx.gt.points), pred_tree(base.pos);
    auto plan = plan_chamfer(base.pos, gt_tree, pred_tree);

    auto [v, g] = value_and_grad(
        [&](Tape&, std::span<const Var> p) {
            auto f = run_forward<Var>(fx.arch, p, fx.batch);
            return chamfer_eval<Var>(f.pos, fx.gt, plan);
        },
        fx.atlas.params);
    auto g_fd = finite_diff_grad(
        [&](std::span<const double> p) {
            auto f = run_forward<double>(fx.arch, p, fx.batch);
            return chamfer_eval<double>(std::span<const Vec3d>(f.pos), fx.gt, plan);
        },
        fx.atlas.params, 1e-5);
    CHECK(v == doctest::Approx(chamfer_eval<double>(std::span<const Vec3d>(base.pos), fx.gt, plan)));
    check_grad(g, g_fd);
}

TEST_CASE("gradients match finite differences: distortion, skew, overlap") {
    Fixture fx;
    auto loss_of = [&]<class S>(const Forward<S>& f) {
        auto forms = std::span<const Fff<S>>(f.forms);
        auto areas = std::span<const S>(f.areas);
        auto po = std::span<const int>(fx.batch.patch_of);
        auto [le, lg] = distortion<S>(forms, po, areas);
        auto sk = skew<S>(forms, po, areas);
        auto ol = overlap<S>(areas, 0.001);  // tiny GT area so the hinge is active
        return le + lg + sk + ol;
    };
    auto [v, g] = value_and_grad(
        [&](Tape&, std::span<const Var> p) {
            auto f = run_forward<Var>(fx.arch, p, fx.batch);
            return loss_of(f);
        },
        fx.atlas.params);
    auto g_fd = finite_diff_grad(
        [&](std::span<const double> p) {
            auto f = run_forward<double>(fx.arch, p, fx.batch);
            return loss_of(f);
        },
        fx.atlas.params, 1e-5);
    CHECK(std::isfinite(v));
    check_grad(g, g_fd);
}

TEST_CASE("gradients match finite differences: stitching") {
    Fixture fx;
    Rng rng(22);
    std::vector<Vec2d> muv;
    std::vector<int> mpatch;
    auto uvs = sample_margin(MarginSpec{0.1}, 15, rng);
    for (int k = 0; k < 2; ++k)
        for (const Vec2d& uv : uvs) {
            muv.push_back(uv);
            mpatch.push_back(k);
        }

    auto decode_all = [&]<class S>(std::span<const S> p) {
        auto f = run_forward<S>(fx.arch, p, fx.batch);
        std::vector<Vec3<S>> m;
        for (size_t i = 0; i < muv.size(); ++i)
            m.push_back(decode<S>(fx.arch, p, mpatch[i], muv[i].u, muv[i].v));
        return std::pair(std::move(m), std::move(f.pos));
    };
    auto [m0, s0] = decode_all(std::span<const double>(fx.atlas.params));
    auto plan = plan_stitching(m0, mpatch, s0, fx.batch.patch_of, 2);

    auto [v, g] = value_and_grad(
        [&](Tape&, std::span<const Var> p) {
            auto [m, s] = decode_all(p);
            return stitching_eval<Var>(std::span<const Vec3<Var>>(m),
                                       std::span<const Vec3<Var>>(s), plan);
        },
        fx.atlas.params);
    auto g_fd = finite_diff_grad(
        [&](std::span<const double> p) {
            auto [m, s] = decode_all(p);
            return stitching_eval<double>(std::span<const Vec3d>(m), std::span<const Vec3d>(s),
                                          plan);
        },
        fx.atlas.params, 1e-5);
    CHECK(v > 0.0);
    check_grad(g, g_fd);
}

TEST_CASE("gradients match finite differences: surface consistency") {
    Fixture fx;
    auto base = run_forward<double>(fx.arch, fx.atlas.params, fx.batch);
    PredictedCloud cloud = cloud_from(
        base.pos, std::vector<Vec3d>(base.pos.size(), Vec3d{0, 0, 1}), fx.batch.patch_of);
    KdTree gt_tree(fx.gt.points);
    auto assoc = associate_gt(base.pos, fx.gt, gt_tree);

    for (NormalMode mode : {NormalMode::Analytic, NormalMode::Approximate}) {
        ConsistencyConfig cfg;
        cfg.normal_mode = mode;
        cfg.neighbor_cfg.theta_deg = 179.0;  // random GT normals; keep the gate open
        auto plan = plan_consistency(cloud, assoc, cfg);

        // full mode: gradient flows through the global covariance normal
        auto [v, g] = value_and_grad(
            [&](Tape&, std::span<const Var> p) {
                auto f = run_forward<Var>(fx.arch, p, fx.batch);
                return surface_consistency_eval<Var>(std::span<const Vec3<Var>>(f.pos),
                                                     std::span<const Vec3<Var>>(f.nrm), plan, cfg);
            },
            fx.atlas.params);
        auto g_fd = finite_diff_grad(
            [&](std::span<const double> p) {
                auto f = run_forward<double>(fx.arch, p, fx.batch);
                return surface_consistency_eval<double>(std::span<const Vec3d>(f.pos),
                                                        std::span<const Vec3d>(f.nrm), plan, cfg);
            },
            fx.atlas.params, 1e-4);
        CHECK(v >= -1e-12);
        CHECK(v <= 1.0);
        check_grad(g, g_fd);

        // detached mode: freeze arbitrary unit vectors as the global normals so
        // the gradient through the predicted normal is nonzero and generic
        std::vector<Vec3d> fixed;
        Rng frng(31);
        for (size_t i = 0; i < base.pos.size(); ++i)
            fixed.push_back(normalized(
                {frng.uniform(-1, 1), frng.uniform(-1, 1), frng.uniform(-1, 1)}));
        ConsistencyConfig det = cfg;
        det.grad_through_global = false;
        auto [vd, gd] = value_and_grad(
            [&](Tape&, std::span<const Var> p) {
                auto f = run_forward<Var>(fx.arch, p, fx.batch);
                return surface_consistency_eval<Var>(std::span<const Vec3<Var>>(f.pos),
                                                     std::span<const Vec3<Var>>(f.nrm), plan, det,
                                                     &fixed);
            },
            fx.atlas.params);
        auto gd_fd = finite_diff_grad(
            [&](std::span<const double> p) {
                auto f = run_forward<double>(fx.arch, p, fx.batch);
                return surface_consistency_eval<double>(std::span<const Vec3d>(f.pos),
                                                        std::span<const Vec3d>(f.nrm), plan, det,
                                                        &fixed);
            },
            fx.atlas.params, 1e-4);
        CHECK(vd >= -1e-12);
        CHECK(vd <= 1.0);
        check_grad(gd, gd_fd);
    }
}
