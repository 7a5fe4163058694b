#pragma once

#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "patchfit/decoder.hpp"
#include "patchfit/spatial.hpp"
#include "patchfit/tape.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

struct LossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double alpha_E = 0.001;
    double alpha_G = 0.001;
    double alpha_sk = 0.001;
    double alpha_ol = 0.1;
    double alpha_sc = 0.001;
    double alpha_st = 0.001;
};

struct LossBreakdown {
    double chd = 0, l_E = 0, l_G = 0, l_sk = 0, l_ol = 0, l_sc = 0, l_st = 0;
    double total = 0;
};

enum class NormalMode { Analytic, Approximate };

struct ConsistencyConfig {
    NormalMode normal_mode = NormalMode::Analytic;
    bool grad_through_global = true;
    NeighborConfig neighbor_cfg;
};

// Discrete selections (argmins, neighbor sets) are made once from plain
// positions and frozen into a plan; gradients flow through the distances to
// the selected points, never through the selection itself.

template <class S>
S sq_dist_const(const Vec3<S>& p, const Vec3d& q) {
    auto dx = p.x - q.x;
    auto dy = p.y - q.y;
    auto dz = p.z - q.z;
    return dx * dx + dy * dy + dz * dz;
}

template <class S>
S sq_dist(const Vec3<S>& p, const Vec3<S>& q) {
    auto dx = p.x - q.x;
    auto dy = p.y - q.y;
    auto dz = p.z - q.z;
    return dx * dx + dy * dy + dz * dz;
}

// --- Chamfer ----------------------------------------------------------------

struct ChamferPlan {
    std::vector<int> pred_to_gt;  // per predicted point, nearest GT index
    std::vector<int> gt_to_pred;  // per GT point, nearest predicted index
};

inline ChamferPlan plan_chamfer(std::span<const Vec3d> pred, const KdTree& gt_tree,
                                const KdTree& pred_tree) {
    if (pred.empty() || gt_tree.size() == 0) throw LossError("chamfer: empty cloud");
    ChamferPlan plan;
    plan.pred_to_gt.reserve(pred.size());
    for (const Vec3d& p : pred) plan.pred_to_gt.push_back(gt_tree.nearest(p));
    plan.gt_to_pred.reserve(gt_tree.size());
    for (size_t j = 0; j < gt_tree.size(); ++j)
        plan.gt_to_pred.push_back(pred_tree.nearest(gt_tree.point(static_cast<int>(j))));
    return plan;
}

template <class S>
S chamfer_eval(std::span<const Vec3<S>> pred, const GroundTruthCloud& gt,
               const ChamferPlan& plan) {
    std::vector<S> t1, t2;
    t1.reserve(pred.size());
    for (size_t i = 0; i < pred.size(); ++i)
        t1.push_back(sq_dist_const(pred[i], gt.points[static_cast<size_t>(plan.pred_to_gt[i])]));
    t2.reserve(gt.points.size());
    for (size_t j = 0; j < gt.points.size(); ++j)
        t2.push_back(sq_dist_const(pred[static_cast<size_t>(plan.gt_to_pred[j])], gt.points[j]));
    return vsum(std::span<const S>(t1)) * (1.0 / static_cast<double>(pred.size())) +
           vsum(std::span<const S>(t2)) * (1.0 / static_cast<double>(gt.points.size()));
}

inline double chamfer(const PredictedCloud& pred, const GroundTruthCloud& gt) {
    if (pred.points.empty() || gt.points.empty()) throw LossError("chamfer: empty cloud");
    auto pos = pred.positions();
    KdTree gt_tree(gt.points), pred_tree(pos);
    auto plan = plan_chamfer(pos, gt_tree, pred_tree);
    return chamfer_eval<double>(pos, gt, plan);
}

// --- distortion / skew / overlap ---------------------------------------------

// l_[E|G] = mean_i ((E_i - mu_E) / A^(k_i))^2 with the mean taken over the
// whole batch (all K*M points of the iteration).
template <class S>
std::pair<S, S> distortion(std::span<const Fff<S>> forms, std::span<const int> patch_of,
                           std::span<const S> areas) {
    for (const S& a : areas)
        if (!(value_of(a) > 0.0)) throw LossError("distortion: non-positive patch area");
    double inv_n = 1.0 / static_cast<double>(forms.size());
    std::vector<S> es, gs;
    es.reserve(forms.size());
    gs.reserve(forms.size());
    for (const Fff<S>& f : forms) {
        es.push_back(f.E);
        gs.push_back(f.G);
    }
    S mu_e = vsum(std::span<const S>(es)) * inv_n;
    S mu_g = vsum(std::span<const S>(gs)) * inv_n;
    std::vector<S> te, tg;
    te.reserve(forms.size());
    tg.reserve(forms.size());
    for (size_t i = 0; i < forms.size(); ++i) {
        const S& a = areas[static_cast<size_t>(patch_of[i])];
        auto de = (forms[i].E - mu_e) / a;
        auto dg = (forms[i].G - mu_g) / a;
        te.push_back(de * de);
        tg.push_back(dg * dg);
    }
    return {vsum(std::span<const S>(te)) * inv_n, vsum(std::span<const S>(tg)) * inv_n};
}

template <class S>
S skew(std::span<const Fff<S>> forms, std::span<const int> patch_of,
       std::span<const S> areas) {
    for (const S& a : areas)
        if (!(value_of(a) > 0.0)) throw LossError("skew: non-positive patch area");
    std::vector<S> ts;
    ts.reserve(forms.size());
    for (size_t i = 0; i < forms.size(); ++i) {
        auto r = forms[i].F / areas[static_cast<size_t>(patch_of[i])];
        ts.push_back(r * r);
    }
    return vsum(std::span<const S>(ts)) * (1.0 / static_cast<double>(forms.size()));
}

// L_ol = max(0, sum_k A^(k) - A_gt)^2
template <class S>
S overlap(std::span<const S> areas, double gt_area) {
    if (!(gt_area > 0.0)) throw LossError("overlap: GT area must be positive");
    auto excess = relu(vsum(areas) - gt_area);
    return excess * excess;
}

// --- surface consistency ------------------------------------------------------

struct ConsistencyPlan {
    std::vector<std::vector<int>> patch_nb;   // only filled in approximate mode
    std::vector<std::vector<int>> global_nb;
    std::vector<uint8_t> skip;                // degenerate covariance after fallback
    std::vector<uint8_t> fallback;            // per point, angle filter starved
    int fallback_count = 0;
    int skipped_count = 0;
};

inline ConsistencyPlan plan_consistency(const PredictedCloud& cloud,
                                        const GtAssociation& assoc,
                                        const ConsistencyConfig& cfg) {
    size_t n_pts = cloud.points.size();
    auto pos = cloud.positions();
    KdTree global_tree(pos);

    // per-patch index structures (approximate mode needs patch neighborhoods)
    int n_patches = 0;
    for (const auto& p : cloud.points) n_patches = std::max(n_patches, p.patch_id + 1);
    std::vector<std::vector<int>> members(static_cast<size_t>(n_patches));
    for (size_t i = 0; i < n_pts; ++i)
        members[static_cast<size_t>(cloud.points[i].patch_id)].push_back(static_cast<int>(i));

    std::vector<std::unique_ptr<KdTree>> patch_trees;
    std::vector<std::vector<Vec3d>> patch_pos(static_cast<size_t>(n_patches));
    std::vector<int> local_index(n_pts, -1);
    if (cfg.normal_mode == NormalMode::Approximate) {
        for (int k = 0; k < n_patches; ++k) {
            auto& mem = members[static_cast<size_t>(k)];
            for (size_t li = 0; li < mem.size(); ++li)
                local_index[static_cast<size_t>(mem[li])] = static_cast<int>(li);
            for (int gi : mem) patch_pos[static_cast<size_t>(k)].push_back(pos[static_cast<size_t>(gi)]);
            patch_trees.push_back(std::make_unique<KdTree>(patch_pos[static_cast<size_t>(k)]));
        }
    }

    ConsistencyPlan plan;
    plan.global_nb.resize(n_pts);
    plan.skip.assign(n_pts, 0);
    plan.fallback.assign(n_pts, 0);
    if (cfg.normal_mode == NormalMode::Approximate) plan.patch_nb.resize(n_pts);

    std::vector<Vec3d> nb_pts;
    for (size_t i = 0; i < n_pts; ++i) {
        auto res = constrained_knn(global_tree, assoc.gt_normal, static_cast<int>(i),
                                   cfg.neighbor_cfg);
        plan.global_nb[i] = res.indices;
        if (res.fallback) {
            plan.fallback[i] = 1;
            ++plan.fallback_count;
        }
        nb_pts.clear();
        for (int j : res.indices) nb_pts.push_back(pos[static_cast<size_t>(j)]);
        bool degenerate = covariance_degenerate(nb_pts);
        if (!degenerate && cfg.normal_mode == NormalMode::Approximate) {
            int k = cloud.points[i].patch_id;
            plan.patch_nb[i] = patch_neighborhood(*patch_trees[static_cast<size_t>(k)],
                                                  members[static_cast<size_t>(k)],
                                                  pos[i], local_index[i], cfg.neighbor_cfg.n);
            nb_pts.clear();
            for (int j : plan.patch_nb[i]) nb_pts.push_back(pos[static_cast<size_t>(j)]);
            degenerate = covariance_degenerate(nb_pts);
        }
        if (degenerate) {
            plan.skip[i] = 1;
            ++plan.skipped_count;
        }
    }
    return plan;
}

namespace detail {

inline Vec3d eigvec_of(std::span<const Vec3d> pts) {
    return sym3_eigen(centered_covariance(pts)).vec[0];
}

inline Vec3<Var> eigvec_of(std::span<const Vec3<Var>> pts) {
    double n = static_cast<double>(pts.size());
    std::vector<Var> xs, ys, zs;
    xs.reserve(pts.size());
    ys.reserve(pts.size());
    zs.reserve(pts.size());
    for (const auto& p : pts) {
        xs.push_back(p.x);
        ys.push_back(p.y);
        zs.push_back(p.z);
    }
    Var mx = vsum(std::span<const Var>(xs)) * (1.0 / n);
    Var my = vsum(std::span<const Var>(ys)) * (1.0 / n);
    Var mz = vsum(std::span<const Var>(zs)) * (1.0 / n);
    std::vector<Var> dx, dy, dz;
    dx.reserve(pts.size());
    dy.reserve(pts.size());
    dz.reserve(pts.size());
    for (const auto& p : pts) {
        dx.push_back(p.x - mx);
        dy.push_back(p.y - my);
        dz.push_back(p.z - mz);
    }
    auto sx = std::span<const Var>(dx);
    auto sy = std::span<const Var>(dy);
    auto sz = std::span<const Var>(dz);
    std::array<Var, 6> c = {
        dot_span(sx, sx) * (1.0 / n), dot_span(sx, sy) * (1.0 / n),
        dot_span(sx, sz) * (1.0 / n), dot_span(sy, sy) * (1.0 / n),
        dot_span(sy, sz) * (1.0 / n), dot_span(sz, sz) * (1.0 / n)};
    return smallest_eigenvector(c).first;
}

template <class S>
Vec3d plain(const Vec3<S>& v) {
    return {value_of(v.x), value_of(v.y), value_of(v.z)};
}

}  // namespace detail

// L_sc = mean_i 1 - (n^p . n^g)^2 over non-skipped points. `analytic_normals`
// is consulted only in analytic mode. When `fixed_global` is non-null those
// vectors replace the covariance-based n^g (used by the detached-mode
// finite-difference oracle); otherwise grad_through_global=false detaches
// n^g by evaluating it on plain values.
template <class S>
S surface_consistency_eval(std::span<const Vec3<S>> positions,
                           std::span<const Vec3<S>> analytic_normals,
                           const ConsistencyPlan& plan, const ConsistencyConfig& cfg,
                           const std::vector<Vec3d>* fixed_global = nullptr) {
    std::vector<S> terms;
    std::vector<Vec3<S>> nb;
    std::vector<Vec3d> nb_plain;
    for (size_t i = 0; i < positions.size(); ++i) {
        if (plan.skip[i]) continue;

        Vec3<S> np;
        if (cfg.normal_mode == NormalMode::Analytic) {
            np = analytic_normals[i];
        } else {
            nb.clear();
            for (int j : plan.patch_nb[i]) nb.push_back(positions[static_cast<size_t>(j)]);
            np = detail::eigvec_of(std::span<const Vec3<S>>(nb));
        }

        S term;
        if (fixed_global != nullptr || !cfg.grad_through_global) {
            Vec3d ng;
            if (fixed_global != nullptr) {
                ng = (*fixed_global)[i];
            } else {
                nb_plain.clear();
                for (int j : plan.global_nb[i])
                    nb_plain.push_back(detail::plain(positions[static_cast<size_t>(j)]));
                ng = detail::eigvec_of(nb_plain);
            }
            auto d = np.x * ng.x + np.y * ng.y + np.z * ng.z;
            term = 1.0 - d * d;
        } else {
            nb.clear();
            for (int j : plan.global_nb[i]) nb.push_back(positions[static_cast<size_t>(j)]);
            Vec3<S> ng = detail::eigvec_of(std::span<const Vec3<S>>(nb));
            auto d = dot(np, ng);
            term = 1.0 - d * d;
        }
        terms.push_back(term);
    }
    if (terms.empty()) throw LossError("surface_consistency: all points skipped");
    return vsum(std::span<const S>(terms)) * (1.0 / static_cast<double>(terms.size()));
}

inline double surface_consistency(const PredictedCloud& cloud, const GroundTruthCloud& gt,
                                  const ConsistencyConfig& cfg) {
    auto pos = cloud.positions();
    KdTree gt_tree(gt.points);
    auto assoc = associate_gt(pos, gt, gt_tree);
    auto plan = plan_consistency(cloud, assoc, cfg);
    std::vector<Vec3d> normals;
    normals.reserve(cloud.points.size());
    for (const auto& p : cloud.points) normals.push_back(p.normal);
    return surface_consistency_eval<double>(pos, normals, plan, cfg);
}

// --- stitching ----------------------------------------------------------------

struct StitchPlan {
    std::vector<int> nearest_other;      // per margin point, closest sample of another patch
    std::vector<int> margin_patch;       // per margin point, owning patch
    int patch_count = 0;
};

inline StitchPlan plan_stitching(std::span<const Vec3d> margin_pos,
                                 std::span<const int> margin_patch,
                                 std::span<const Vec3d> sample_pos,
                                 std::span<const int> sample_patch, int patch_count) {
    if (patch_count < 2) throw LossError("stitching: needs at least 2 patches");
    StitchPlan plan;
    plan.patch_count = patch_count;
    plan.margin_patch.assign(margin_patch.begin(), margin_patch.end());
    plan.nearest_other.reserve(margin_pos.size());
    // per-patch trees with mapping back to global sample indices
    std::vector<std::vector<Vec3d>> pos_by_patch(static_cast<size_t>(patch_count));
    std::vector<std::vector<int>> idx_by_patch(static_cast<size_t>(patch_count));
    for (size_t j = 0; j < sample_pos.size(); ++j) {
        pos_by_patch[static_cast<size_t>(sample_patch[j])].push_back(sample_pos[j]);
        idx_by_patch[static_cast<size_t>(sample_patch[j])].push_back(static_cast<int>(j));
    }
    std::vector<std::unique_ptr<KdTree>> trees;
    for (int k = 0; k < patch_count; ++k) {
        if (pos_by_patch[static_cast<size_t>(k)].empty())
            throw LossError("stitching: a patch has no sample points");
        trees.push_back(std::make_unique<KdTree>(pos_by_patch[static_cast<size_t>(k)]));
    }
    for (size_t i = 0; i < margin_pos.size(); ++i) {
        int own = margin_patch[i];
        double best_d2 = 0.0;
        int best = -1;
        for (int l = 0; l < patch_count; ++l) {
            if (l == own) continue;
            int local = trees[static_cast<size_t>(l)]->nearest(margin_pos[i]);
            int global = idx_by_patch[static_cast<size_t>(l)][static_cast<size_t>(local)];
            double d2 = dist2(margin_pos[i], sample_pos[static_cast<size_t>(global)]);
            if (best < 0 || d2 < best_d2 || (d2 == best_d2 && global < best)) {
                best_d2 = d2;
                best = global;
            }
        }
        plan.nearest_other.push_back(best);
    }
    return plan;
}

// L_st = sum_k (1/M_k) sum_i ||p^m_{k_i} - nearest other-patch sample||^2;
// a sum over patches, not a mean.
template <class S>
S stitching_eval(std::span<const Vec3<S>> margin_pos, std::span<const Vec3<S>> sample_pos,
                 const StitchPlan& plan) {
    std::vector<int> count(static_cast<size_t>(plan.patch_count), 0);
    for (int k : plan.margin_patch) ++count[static_cast<size_t>(k)];
    for (int k = 0; k < plan.patch_count; ++k)
        if (count[static_cast<size_t>(k)] == 0)
            throw LossError("stitching: a patch has no margin points");
    std::vector<S> per_point;
    per_point.reserve(margin_pos.size());
    for (size_t i = 0; i < margin_pos.size(); ++i) {
        auto d2 = sq_dist(margin_pos[i], sample_pos[static_cast<size_t>(plan.nearest_other[i])]);
        per_point.push_back(d2 * (1.0 / count[static_cast<size_t>(plan.margin_patch[i])]));
    }
    return vsum(std::span<const S>(per_point));
}

inline double stitching(std::span<const Vec3d> margin_pos, std::span<const int> margin_patch,
                        const PredictedCloud& samples) {
    int n_patches = 0;
    for (const auto& p : samples.points) n_patches = std::max(n_patches, p.patch_id + 1);
    auto sample_pos = samples.positions();
    std::vector<int> sample_patch;
    sample_patch.reserve(samples.points.size());
    for (const auto& p : samples.points) sample_patch.push_back(p.patch_id);
    auto plan = plan_stitching(margin_pos, margin_patch, sample_pos, sample_patch, n_patches);
    return stitching_eval<double>(margin_pos, sample_pos, plan);
}

// --- combination ----------------------------------------------------------------

// Weighted sum of all terms; with alpha_sc = alpha_st = 0 this reduces exactly
// to the DSP objective.
inline LossBreakdown total_loss(double chd, double l_E, double l_G, double l_sk,
                                double l_ol, double l_sc, double l_st,
                                const LossWeights& w) {
    LossBreakdown b{chd, l_E, l_G, l_sk, l_ol, l_sc, l_st, 0.0};
    b.total = chd + w.alpha_E * l_E + w.alpha_G * l_G + w.alpha_sk * l_sk +
              w.alpha_ol * l_ol + w.alpha_sc * l_sc + w.alpha_st * l_st;
    return b;
}

}  // namespace patchfit
