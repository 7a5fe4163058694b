#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "patchfit/metrics.hpp"
#include "patchfit/rng.hpp"

using namespace patchfit;

namespace {

PredictedCloud cloud_from(const std::vector<Vec3d>& pos, const std::vector<Vec3d>& nrm,
                          const std::vector<int>& patch_of,
                          const std::vector<Vec2d>* uv = nullptr) {
    PredictedCloud c;
    for (size_t i = 0; i < pos.size(); ++i) {
        PredictedPoint p;
        p.position = pos[i];
        p.normal = nrm[i];
        p.patch_id = patch_of[i];
        if (uv) p.uv = (*uv)[i];
        c.points.push_back(p);
    }
    return c;
}

}  // namespace

TEST_CASE("metric_cd agrees with the chamfer loss") {
    Rng rng(41);
    GroundTruthCloud gt;
    for (int i = 0; i < 50; ++i) {
        gt.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        gt.normals.push_back({0, 0, 1});
    }
    gt.area = 1.0;
    std::vector<Vec3d> pos;
    for (int i = 0; i < 30; ++i)
        pos.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    PredictedCloud pred =
        cloud_from(pos, std::vector<Vec3d>(30, {0, 0, 1}), std::vector<int>(30, 0));
    CHECK(metric_cd(pred, gt) == chamfer(pred, gt));
}

TEST_CASE("metric_angular_error: exact angles and sign invariance") {
    GroundTruthCloud gt;
    gt.points = {{0, 0, 0}, {1, 0, 0}};
    gt.normals = {{0, 0, 1}, {0, 0, 1}};
    gt.area = 1.0;

    // aligned normals -> 0 degrees
    PredictedCloud aligned = cloud_from(gt.points, gt.normals, {0, 0});
    CHECK(metric_angular_error(aligned, gt) == doctest::Approx(0.0).epsilon(1e-12));

    // flipped normals still 0 degrees (unoriented comparison)
    PredictedCloud flipped = cloud_from(gt.points, {{0, 0, -1}, {0, 0, -1}}, {0, 0});
    CHECK(metric_angular_error(flipped, gt) == doctest::Approx(0.0).epsilon(1e-12));

    // orthogonal -> 90, mixed 0 and 90 -> 45
    PredictedCloud ortho = cloud_from(gt.points, {{1, 0, 0}, {0, 1, 0}}, {0, 0});
    CHECK(metric_angular_error(ortho, gt) == doctest::Approx(90.0).epsilon(1e-12));
    PredictedCloud mixed = cloud_from(gt.points, {{0, 0, 1}, {1, 0, 0}}, {0, 0});
    CHECK(metric_angular_error(mixed, gt) == doctest::Approx(45.0).epsilon(1e-12));

    // 60 degrees exactly
    double c60 = 0.5, s60 = std::sqrt(3.0) / 2.0;
    PredictedCloud deg60 = cloud_from(gt.points, {{s60, 0, c60}, {-s60, 0, -c60}}, {0, 0});
    CHECK(metric_angular_error(deg60, gt) == doctest::Approx(60.0).epsilon(1e-12));

    // degenerate (zero) normals are skipped and counted
    int skipped = -1;
    PredictedCloud degen = cloud_from(gt.points, {{0, 0, 0}, {1, 0, 0}}, {0, 0});
    CHECK(metric_angular_error(degen, gt, &skipped) == doctest::Approx(90.0).epsilon(1e-12));
    CHECK(skipped == 1);
}

TEST_CASE("metric_stitching: coincident zero, hand case, loss agreement") {
    // both patches share the same sample set; margin points coincide
    Rng rng(42);
    std::vector<Vec3d> pos;
    std::vector<int> po;
    std::vector<Vec2d> uv;
    for (int k = 0; k < 2; ++k)
        for (int i = 0; i < 20; ++i) {
            double u = (i % 5) / 4.0, v = (i / 5) / 4.0;
            pos.push_back({u, v, 0});
            po.push_back(k);
            uv.push_back({u, v});
        }
    PredictedCloud coincident = cloud_from(pos, std::vector<Vec3d>(pos.size(), {0, 0, 1}), po, &uv);
    CHECK(metric_stitching(coincident, 0.1) == doctest::Approx(0.0).epsilon(1e-15));

    // hand case: one margin point per patch, 0.1 apart -> 0.01 + 0.01 = 0.02
    std::vector<Vec3d> p2 = {{0, 0, 0}, {0.1, 0, 0}};
    std::vector<int> po2 = {0, 1};
    std::vector<Vec2d> uv2 = {{0.05, 0.5}, {0.05, 0.5}};  // inside the margin
    PredictedCloud two = cloud_from(p2, std::vector<Vec3d>(2, {0, 0, 1}), po2, &uv2);
    std::vector<double> per_patch;
    CHECK(metric_stitching(two, 0.1, &per_patch) == doctest::Approx(0.02).epsilon(1e-14));
    REQUIRE(per_patch.size() == 2);
    CHECK(per_patch[0] == doctest::Approx(0.01).epsilon(1e-14));
    CHECK(per_patch[1] == doctest::Approx(0.01).epsilon(1e-14));

    // agreement with the stitching loss evaluated on the same selection
    std::vector<Vec3d> rpos;
    std::vector<int> rpo;
    std::vector<Vec2d> ruv;
    for (int i = 0; i < 120; ++i) {
        rpos.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        rpo.push_back(i % 3);
        ruv.push_back({rng.uniform(), rng.uniform()});
    }
    PredictedCloud rc = cloud_from(rpos, std::vector<Vec3d>(rpos.size(), {0, 0, 1}), rpo, &ruv);
    double m = metric_stitching(rc, 0.2);
    std::vector<Vec3d> mpos;
    std::vector<int> mpatch;
    for (const auto& p : rc.points)
        if (in_margin(p.uv, 0.2)) {
            mpos.push_back(p.position);
            mpatch.push_back(p.patch_id);
        }
    CHECK(m == doctest::Approx(stitching(mpos, mpatch, rc)).epsilon(1e-12));

    PredictedCloud single = cloud_from(p2, std::vector<Vec3d>(2, {0, 0, 1}), {0, 0}, &uv2);
    CHECK_THROWS_AS(metric_stitching(single, 0.1), LossError);
}

TEST_CASE("metric_overlap: fixed cases, bounds, brute force") {
    // two patches far apart: each point sees only its own patch -> 1.0
    std::vector<Vec3d> pos = {{0, 0, 0}, {0.01, 0, 0}, {10, 0, 0}, {10.01, 0, 0}};
    std::vector<int> po = {0, 0, 1, 1};
    PredictedCloud apart = cloud_from(pos, std::vector<Vec3d>(4, {0, 0, 1}), po);
    CHECK(metric_overlap(apart, 0.05) == doctest::Approx(1.0).epsilon(1e-15));

    // identical patches: every point sees both -> 2.0
    std::vector<Vec3d> pos2 = {{0, 0, 0}, {0, 0, 0}, {1, 0, 0}, {1, 0, 0}};
    std::vector<int> po_alt = {0, 1, 0, 1};
    PredictedCloud same = cloud_from(pos2, std::vector<Vec3d>(4, {0, 0, 1}), po_alt);
    CHECK(metric_overlap(same, 0.05) == doctest::Approx(2.0).epsilon(1e-15));

    // half the points overlap: 2 .. own patch only, 2 .. both -> 1.5
    std::vector<Vec3d> pos3 = {{0, 0, 0}, {5, 0, 0}, {0.01, 0, 0}, {9, 0, 0}};
    PredictedCloud half = cloud_from(pos3, std::vector<Vec3d>(4, {0, 0, 1}), po);
    CHECK(metric_overlap(half, 0.05) == doctest::Approx(1.5).epsilon(1e-15));

    CHECK_THROWS_AS(metric_overlap(apart, 0.0), LossError);

    // brute force on random clouds; verify bounds [1, K]
    Rng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        int n = 50 + static_cast<int>(rng.below(100));
        int K = 2 + static_cast<int>(rng.below(4));
        std::vector<Vec3d> rp;
        std::vector<int> rpo;
        for (int i = 0; i < n; ++i) {
            rp.push_back({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)});
            rpo.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(K))));
        }
        PredictedCloud rc = cloud_from(rp, std::vector<Vec3d>(rp.size(), {0, 0, 1}), rpo);
        double t = rng.uniform(0.02, 0.2);
        double got = metric_overlap(rc, t);
        double expect = 0.0;
        for (int i = 0; i < n; ++i) {
            std::vector<char> seen(static_cast<size_t>(K), 0);
            seen[static_cast<size_t>(rpo[static_cast<size_t>(i)])] = 1;
            for (int j = 0; j < n; ++j)
                if (dist2(rp[static_cast<size_t>(i)], rp[static_cast<size_t>(j)]) <= t * t)
                    seen[static_cast<size_t>(rpo[static_cast<size_t>(j)])] = 1;
            int c = 0;
            for (char s : seen) c += s;
            expect += c;
        }
        expect /= n;
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
        CHECK(got >= 1.0);
        CHECK(got <= static_cast<double>(K));
    }
}
