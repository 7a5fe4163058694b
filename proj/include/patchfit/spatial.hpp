#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "patchfit/decoder.hpp"
#include "patchfit/sym3eig.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

struct SpatialError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GroundTruthCloud {
    std::vector<Vec3d> points;
    std::vector<Vec3d> normals;  // unit
    double area = 0.0;           // total surface area (model units squared)
};

struct PredictedCloud {
    std::vector<PredictedPoint> points;

    std::vector<Vec3d> positions() const {
        std::vector<Vec3d> out;
        out.reserve(points.size());
        for (const auto& p : points) out.push_back(p.position);
        return out;
    }
};

struct NeighborConfig {
    int n = 8;
    double theta_deg = 120.0;
};

// Exact k-nearest / radius queries over a static point set. Results are
// identical to a brute-force scan with ties broken by ascending index.
class KdTree {
public:
    explicit KdTree(std::span<const Vec3d> pts) : pts_(pts.begin(), pts.end()) {
        if (pts_.empty()) throw SpatialError("build_index: empty point set");
        order_.resize(pts_.size());
        for (size_t i = 0; i < pts_.size(); ++i) order_[i] = static_cast<int>(i);
        nodes_.reserve(2 * pts_.size() / kLeafSize + 2);
        root_ = build(0, static_cast<int>(pts_.size()));
    }

    size_t size() const { return pts_.size(); }
    const Vec3d& point(int i) const { return pts_[static_cast<size_t>(i)]; }

    std::vector<int> knn(const Vec3d& q, int k, int exclude = -1) const {
        return knn_if(q, k, exclude, [](int) { return true; });
    }

    template <class Pred>
    std::vector<int> knn_if(const Vec3d& q, int k, int exclude, Pred&& accept) const {
        Heap heap;
        heap.k = k;
        search(root_, q, exclude, accept, heap);
        std::sort(heap.items.begin(), heap.items.end());
        std::vector<int> out;
        out.reserve(heap.items.size());
        for (const auto& it : heap.items) out.push_back(it.second);
        return out;
    }

    int nearest(const Vec3d& q, int exclude = -1) const {
        auto r = knn(q, 1, exclude);
        return r.empty() ? -1 : r[0];
    }

    std::vector<int> radius(const Vec3d& q, double r) const {
        std::vector<std::pair<double, int>> hits;
        double r2 = r * r;
        radius_search(root_, q, r2, hits);
        std::sort(hits.begin(), hits.end());
        std::vector<int> out;
        out.reserve(hits.size());
        for (const auto& h : hits) out.push_back(h.second);
        return out;
    }

    // true if any point other than `exclude` lies within distance r of q;
    // early-exits, used by the overlap metric
    bool any_within(const Vec3d& q, double r, int exclude = -1) const {
        return any_within_rec(root_, q, r * r, exclude);
    }

private:
    static constexpr int kLeafSize = 8;

    struct Node {
        int left = -1, right = -1;
        int begin = 0, end = 0;  // leaf range into order_
        int axis = -1;
        double split = 0.0;
    };

    struct Heap {
        int k = 0;
        std::vector<std::pair<double, int>> items;  // (dist2, index), max at front

        bool full() const { return static_cast<int>(items.size()) == k; }
        const std::pair<double, int>& worst() const { return items.front(); }

        void offer(double d2, int idx) {
            std::pair<double, int> cand{d2, idx};
            if (!full()) {
                items.push_back(cand);
                std::push_heap(items.begin(), items.end());
            } else if (cand < worst()) {
                std::pop_heap(items.begin(), items.end());
                items.back() = cand;
                std::push_heap(items.begin(), items.end());
            }
        }
    };

    static double comp(const Vec3d& p, int axis) {
        return axis == 0 ? p.x : (axis == 1 ? p.y : p.z);
    }

    int build(int begin, int end) {
        Node node;
        node.begin = begin;
        node.end = end;
        if (end - begin > kLeafSize) {
            Vec3d lo = pts_[static_cast<size_t>(order_[static_cast<size_t>(begin)])];
            Vec3d hi = lo;
            for (int i = begin + 1; i < end; ++i) {
                const Vec3d& p = pts_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
                lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
                hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
            }
            Vec3d ext = hi - lo;
            int axis = 0;
            if (ext.y > comp(ext, axis)) axis = 1;
            if (ext.z > comp(ext, axis)) axis = 2;
            if (comp(ext, axis) > 0.0) {
                int mid = (begin + end) / 2;
                std::nth_element(order_.begin() + begin, order_.begin() + mid,
                                 order_.begin() + end, [&](int a, int b) {
                                     return comp(pts_[static_cast<size_t>(a)], axis) <
                                            comp(pts_[static_cast<size_t>(b)], axis);
                                 });
                node.axis = axis;
                node.split = comp(pts_[static_cast<size_t>(order_[static_cast<size_t>(mid)])], axis);
                int id = static_cast<int>(nodes_.size());
                nodes_.push_back(node);
                int l = build(begin, mid);
                int r = build(mid, end);
                nodes_[static_cast<size_t>(id)].left = l;
                nodes_[static_cast<size_t>(id)].right = r;
                return id;
            }
        }
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size() - 1);
    }

    template <class Pred>
    void search(int id, const Vec3d& q, int exclude, Pred&& accept, Heap& heap) const {
        const Node& node = nodes_[static_cast<size_t>(id)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                int idx = order_[static_cast<size_t>(i)];
                if (idx == exclude || !accept(idx)) continue;
                heap.offer(dist2(q, pts_[static_cast<size_t>(idx)]), idx);
            }
            return;
        }
        double dq = comp(q, node.axis) - node.split;
        int near = dq < 0.0 ? node.left : node.right;
        int far = dq < 0.0 ? node.right : node.left;
        search(near, q, exclude, accept, heap);
        // ties must still be explored: equal distances resolve by index
        if (!heap.full() || dq * dq <= heap.worst().first)
            search(far, q, exclude, accept, heap);
    }

    void radius_search(int id, const Vec3d& q, double r2,
                       std::vector<std::pair<double, int>>& hits) const {
        const Node& node = nodes_[static_cast<size_t>(id)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                int idx = order_[static_cast<size_t>(i)];
                double d2 = dist2(q, pts_[static_cast<size_t>(idx)]);
                if (d2 <= r2) hits.push_back({d2, idx});
            }
            return;
        }
        double dq = comp(q, node.axis) - node.split;
        radius_search(dq < 0.0 ? node.left : node.right, q, r2, hits);
        if (dq * dq <= r2) radius_search(dq < 0.0 ? node.right : node.left, q, r2, hits);
    }

    bool any_within_rec(int id, const Vec3d& q, double r2, int exclude) const {
        const Node& node = nodes_[static_cast<size_t>(id)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                int idx = order_[static_cast<size_t>(i)];
                if (idx != exclude && dist2(q, pts_[static_cast<size_t>(idx)]) <= r2) return true;
            }
            return false;
        }
        double dq = comp(q, node.axis) - node.split;
        if (any_within_rec(dq < 0.0 ? node.left : node.right, q, r2, exclude)) return true;
        if (dq * dq <= r2)
            return any_within_rec(dq < 0.0 ? node.right : node.left, q, r2, exclude);
        return false;
    }

    std::vector<Vec3d> pts_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = 0;
};

// --- covariance normals -----------------------------------------------------

inline constexpr double kRankEps = 1e-12;

struct CovarianceNormal {
    Vec3d normal;    // unit, sign-unoriented
    double gap;      // lambda_mid - lambda_min
};

inline Sym3 centered_covariance(std::span<const Vec3d> pts) {
    double n = static_cast<double>(pts.size());
    Vec3d mean{0, 0, 0};
    for (const Vec3d& p : pts) mean = mean + p;
    mean = mean * (1.0 / n);
    Sym3 c{};
    for (const Vec3d& p : pts) {
        Vec3d d = p - mean;
        c[0] += d.x * d.x;
        c[1] += d.x * d.y;
        c[2] += d.x * d.z;
        c[3] += d.y * d.y;
        c[4] += d.y * d.z;
        c[5] += d.z * d.z;
    }
    for (double& v : c) v /= n;
    return c;
}

inline CovarianceNormal covariance_normal(std::span<const Vec3d> pts) {
    if (pts.size() < 3) throw SpatialError("covariance_normal: need at least 3 points");
    Sym3Eig e = sym3_eigen(centered_covariance(pts));
    if (e.lambda[1] < kRankEps)
        throw SpatialError("covariance_normal: degenerate neighborhood (rank < 2)");
    return {e.vec[0], e.lambda[1] - e.lambda[0]};
}

inline bool covariance_degenerate(std::span<const Vec3d> pts) {
    if (pts.size() < 3) return true;
    Sym3Eig e = sym3_eigen(centered_covariance(pts));
    return e.lambda[1] < kRankEps;
}

// --- associations and neighborhoods -----------------------------------------

struct GtAssociation {
    std::vector<int> gt_index;     // nearest GT point per predicted point
    std::vector<Vec3d> gt_normal;  // that point's normal
};

inline GtAssociation associate_gt(std::span<const Vec3d> pred, const GroundTruthCloud& gt,
                                  const KdTree& gt_tree) {
    if (pred.empty() || gt.points.empty())
        throw SpatialError("associate_gt: empty cloud");
    GtAssociation out;
    out.gt_index.reserve(pred.size());
    out.gt_normal.reserve(pred.size());
    for (const Vec3d& p : pred) {
        int j = gt_tree.nearest(p);
        out.gt_index.push_back(j);
        out.gt_normal.push_back(gt.normals[static_cast<size_t>(j)]);
    }
    return out;
}

// n nearest points restricted to the query's own patch, query excluded.
// `patch_tree` indexes only that patch's points; `local_to_global` maps its
// indices back into the full cloud.
inline std::vector<int> patch_neighborhood(const KdTree& patch_tree,
                                           std::span<const int> local_to_global,
                                           const Vec3d& query, int query_local, int n) {
    if (static_cast<int>(patch_tree.size()) - 1 < n)
        throw SpatialError("patch_neighborhood: patch has fewer than n other points");
    auto local = patch_tree.knn(query, n, query_local);
    std::vector<int> out;
    out.reserve(local.size());
    for (int i : local) out.push_back(local_to_global[static_cast<size_t>(i)]);
    return out;
}

struct ConstrainedKnnResult {
    std::vector<int> indices;
    bool fallback = false;  // set when < 3 candidates passed the angle filter
};

// Global neighborhood with the GT-normal angle gate: candidate j qualifies
// when arccos(n_q . n_j) < theta, i.e. dot > cos(theta). Falls back to the
// unconstrained query when fewer than 3 candidates qualify.
inline ConstrainedKnnResult constrained_knn(const KdTree& tree,
                                            std::span<const Vec3d> gt_normals, int query,
                                            const NeighborConfig& cfg) {
    const Vec3d& nq = gt_normals[static_cast<size_t>(query)];
    double cos_theta = std::cos(cfg.theta_deg * M_PI / 180.0);
    auto qualifies = [&](int j) {
        return dot(nq, gt_normals[static_cast<size_t>(j)]) > cos_theta;
    };
    ConstrainedKnnResult out;
    out.indices = tree.knn_if(tree.point(query), cfg.n, query, qualifies);
    if (static_cast<int>(out.indices.size()) < 3) {
        out.indices = tree.knn(tree.point(query), cfg.n, query);
        out.fallback = true;
    }
    return out;
}

}  // namespace patchfit
