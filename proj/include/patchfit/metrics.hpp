#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "patchfit/losses.hpp"
#include "patchfit/spatial.hpp"

namespace patchfit {

struct PatchDiagnostics {
    double area = 0.0;
    double margin_error = 0.0;  // this patch's term of the stitching metric
    int fallback_count = 0;     // constrained-kNN fallbacks on the eval grid
};

struct MetricsReport {
    double cd = 0.0;
    double m_ae = 0.0;               // degrees
    std::optional<double> m_s;       // absent for K = 1
    double m_olap = 0.0;             // mean patch count, >= 1
    int skipped_normals = 0;
    std::vector<PatchDiagnostics> per_patch;
};

inline double metric_cd(const PredictedCloud& pred, const GroundTruthCloud& gt) {
    return chamfer(pred, gt);
}

// m_ae = mean arccos|n . n_gt| in degrees; degenerate analytic normals
// (stored as zero vectors) are skipped and counted.
inline double metric_angular_error(const PredictedCloud& pred, const GroundTruthCloud& gt,
                                   int* skipped = nullptr) {
    KdTree gt_tree(gt.points);
    auto pos = pred.positions();
    auto assoc = associate_gt(pos, gt, gt_tree);
    double sum = 0.0;
    int used = 0, skip = 0;
    for (size_t i = 0; i < pred.points.size(); ++i) {
        const Vec3d& n = pred.points[i].normal;
        if (dot(n, n) < 0.25) {  // degenerate marker
            ++skip;
            continue;
        }
        double c = std::abs(dot(n, assoc.gt_normal[i]));
        sum += std::acos(std::clamp(c, 0.0, 1.0));
        ++used;
    }
    if (skipped) *skipped = skip;
    if (used == 0) return 0.0;
    return (sum / used) * 180.0 / M_PI;
}

// Stitching error evaluated on a deterministic sample: the eval cloud's
// points whose UV origin lies in the r-margin act as margin points, compared
// against the full point sets of the other patches. Optionally reports the
// per-patch terms.
inline double metric_stitching(const PredictedCloud& cloud, double margin_r = 0.1,
                               std::vector<double>* per_patch = nullptr) {
    int n_patches = 0;
    for (const auto& p : cloud.points) n_patches = std::max(n_patches, p.patch_id + 1);
    if (n_patches < 2) throw LossError("metric_stitching: needs at least 2 patches");

    std::vector<Vec3d> margin_pos;
    std::vector<int> margin_patch;
    for (const auto& p : cloud.points) {
        if (in_margin(p.uv, margin_r)) {
            margin_pos.push_back(p.position);
            margin_patch.push_back(p.patch_id);
        }
    }
    auto sample_pos = cloud.positions();
    std::vector<int> sample_patch;
    sample_patch.reserve(cloud.points.size());
    for (const auto& p : cloud.points) sample_patch.push_back(p.patch_id);
    auto plan = plan_stitching(margin_pos, margin_patch, sample_pos, sample_patch, n_patches);

    if (per_patch) {
        per_patch->assign(static_cast<size_t>(n_patches), 0.0);
        std::vector<int> count(static_cast<size_t>(n_patches), 0);
        for (int k : margin_patch) ++count[static_cast<size_t>(k)];
        for (size_t i = 0; i < margin_pos.size(); ++i) {
            double d2 = dist2(margin_pos[i],
                              sample_pos[static_cast<size_t>(plan.nearest_other[i])]);
            (*per_patch)[static_cast<size_t>(margin_patch[i])] +=
                d2 / count[static_cast<size_t>(margin_patch[i])];
        }
    }
    return stitching_eval<double>(std::span<const Vec3d>(margin_pos), sample_pos, plan);
}

// m_olap^(t): mean over points of the number of patches with a point within
// distance t; a point's own patch always qualifies (distance 0 to itself).
inline double metric_overlap(const PredictedCloud& cloud, double t) {
    if (!(t > 0.0)) throw LossError("metric_overlap: threshold must be positive");
    int n_patches = 0;
    for (const auto& p : cloud.points) n_patches = std::max(n_patches, p.patch_id + 1);
    std::vector<std::vector<Vec3d>> pos_by_patch(static_cast<size_t>(n_patches));
    for (const auto& p : cloud.points)
        pos_by_patch[static_cast<size_t>(p.patch_id)].push_back(p.position);
    std::vector<std::unique_ptr<KdTree>> trees;
    for (int k = 0; k < n_patches; ++k)
        trees.push_back(pos_by_patch[static_cast<size_t>(k)].empty()
                            ? nullptr
                            : std::make_unique<KdTree>(pos_by_patch[static_cast<size_t>(k)]));
    double sum = 0.0;
    for (const auto& p : cloud.points) {
        int count = 1;  // own patch
        for (int l = 0; l < n_patches; ++l) {
            if (l == p.patch_id || !trees[static_cast<size_t>(l)]) continue;
            if (trees[static_cast<size_t>(l)]->any_within(p.position, t)) ++count;
        }
        sum += count;
    }
    return sum / static_cast<double>(cloud.points.size());
}

}  // namespace patchfit
