#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchfit/decoder.hpp"
#include "patchfit/losses.hpp"
#include "patchfit/metrics.hpp"
#include "patchfit/rng.hpp"
#include "patchfit/spatial.hpp"
#include "patchfit/tape.hpp"

namespace patchfit {

struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Variant {
    Dsp,               // Chamfer + distortion + skew + overlap only
    Aprox,             // + L_sc with covariance patch normals
    Analyt,            // + L_sc with analytic patch normals
    Stitch,            // + L_st only
    AnalytStitch,      // + L_sc (analytic) + L_st
    AnalytNoArea,      // + L_sc (analytic), L_ol dropped
    AnalytStitchNoArea // + L_sc (analytic) + L_st, L_ol dropped
};

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::Dsp: return "dsp";
        case Variant::Aprox: return "aprox";
        case Variant::Analyt: return "analyt";
        case Variant::Stitch: return "stitch";
        case Variant::AnalytStitch: return "analyt+stitch";
        case Variant::AnalytNoArea: return "analyt-area";
        case Variant::AnalytStitchNoArea: return "analyt+stitch-area";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "dsp") return Variant::Dsp;
    if (s == "aprox") return Variant::Aprox;
    if (s == "analyt") return Variant::Analyt;
    if (s == "stitch") return Variant::Stitch;
    if (s == "analyt+stitch") return Variant::AnalytStitch;
    if (s == "analyt-area") return Variant::AnalytNoArea;
    if (s == "analyt+stitch-area") return Variant::AnalytStitchNoArea;
    throw FitError("unknown variant: " + s);
}

inline bool variant_uses_stitching(Variant v) {
    return v == Variant::Stitch || v == Variant::AnalytStitch ||
           v == Variant::AnalytStitchNoArea;
}

inline bool variant_uses_consistency(Variant v) {
    return v == Variant::Aprox || v == Variant::Analyt || v == Variant::AnalytStitch ||
           v == Variant::AnalytNoArea || v == Variant::AnalytStitchNoArea;
}

struct FitConfig {
    int patch_count = 25;       // K
    int samples_per_patch = 100;  // M, fresh draw each iteration
    int margin_count = 0;       // M_k for L_st margin samples; 0 means M
    int total_iters = 2000;
    int pretrain_iters = -1;    // -1 means total_iters / 2
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    LossWeights weights;
    ConsistencyConfig consistency;
    MarginSpec margin;
    int eval_every = 500;
    uint64_t seed = 0;
    Variant variant = Variant::Dsp;
    int hidden_width = 128;
    int latent_dim = 0;
    int rebuild_every = 1;  // rebuild neighbor structures (and UV draws) every s iters
    int eval_grid = 32;     // deterministic metrics grid per patch

    int effective_pretrain() const {
        return pretrain_iters < 0 ? total_iters / 2 : pretrain_iters;
    }
    int effective_margin_count() const {
        return margin_count > 0 ? margin_count : samples_per_patch;
    }

    void validate() const {
        if (patch_count < 1) throw FitError("config: patch_count must be >= 1");
        if (effective_pretrain() > total_iters)
            throw FitError("config: pretrain_iters exceeds total_iters");
        if (variant_uses_stitching(variant) && weights.alpha_st > 0.0 && patch_count < 2)
            throw FitError("config: stitching variants need at least 2 patches");
        if (samples_per_patch < std::max(consistency.neighbor_cfg.n + 1, 4))
            throw FitError("config: samples_per_patch must be >= max(n+1, 4)");
        if (hidden_width < 2) throw FitError("config: hidden_width must be >= 2");
        if (!(learning_rate > 0.0)) throw FitError("config: learning_rate must be positive");
        if (eval_every < 1) throw FitError("config: eval_every must be >= 1");
        if (rebuild_every < 1) throw FitError("config: rebuild_every must be >= 1");
        if (consistency.neighbor_cfg.n < 3) throw FitError("config: neighborhood n must be >= 3");
        double th = consistency.neighbor_cfg.theta_deg;
        if (!(th > 0.0 && th < 180.0)) throw FitError("config: theta must be in (0, 180)");
    }
};

// Weights actually applied at an iteration: pretraining runs the plain DSP
// objective; afterwards the variant decides which of the extra terms (and
// whether the overlap term) participate.
inline LossWeights phase_weights(const FitConfig& cfg, bool pretrain) {
    LossWeights w = cfg.weights;
    if (pretrain) {
        w.alpha_sc = 0.0;
        w.alpha_st = 0.0;
        return w;
    }
    switch (cfg.variant) {
        case Variant::Dsp: w.alpha_sc = 0.0; w.alpha_st = 0.0; break;
        case Variant::Aprox:
        case Variant::Analyt: w.alpha_st = 0.0; break;
        case Variant::Stitch: w.alpha_sc = 0.0; break;
        case Variant::AnalytStitch: break;
        case Variant::AnalytNoArea: w.alpha_st = 0.0; w.alpha_ol = 0.0; break;
        case Variant::AnalytStitchNoArea: w.alpha_ol = 0.0; break;
    }
    return w;
}

inline ConsistencyConfig effective_consistency(const FitConfig& cfg) {
    ConsistencyConfig c = cfg.consistency;
    if (cfg.variant == Variant::Aprox)
        c.normal_mode = NormalMode::Approximate;
    else if (variant_uses_consistency(cfg.variant))
        c.normal_mode = NormalMode::Analytic;
    return c;
}

inline Atlas init_atlas(const FitConfig& cfg, Rng& rng) {
    return init_atlas(AtlasArch{cfg.patch_count, cfg.hidden_width, cfg.latent_dim}, rng);
}

// --- optimizer ---------------------------------------------------------------

struct OptimizerState {
    std::vector<double> m, v;
    int64_t step = 0;

    explicit OptimizerState(size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void optimizer_step(OptimizerState& state, std::vector<double>& params,
                           std::span<const double> grad, double lr, double beta1 = 0.9,
                           double beta2 = 0.999, double epsilon = 1e-8) {
    if (params.size() != grad.size() || state.m.size() != params.size())
        throw FitError("optimizer_step: shape mismatch");
    for (double g : grad)
        if (!std::isfinite(g)) throw FitError("optimizer_step: non-finite gradient");
    ++state.step;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        double g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + epsilon);
    }
}

// --- divergence guard ----------------------------------------------------------

// Aborts when the total loss stays above 1000x its value at the end of
// pretraining for 100 consecutive iterations.
class DivergenceGuard {
public:
    void set_reference(double v) { reference_ = std::max(v, 1e-12); armed_ = true; }
    bool armed() const { return armed_; }

    // returns true when the run should abort
    bool feed(double total) {
        if (!armed_) return false;
        if (total > 1e3 * reference_)
            ++streak_;
        else
            streak_ = 0;
        return streak_ >= 100;
    }

private:
    double reference_ = 0.0;
    int streak_ = 0;
    bool armed_ = false;
};

// --- evaluation ----------------------------------------------------------------

// Deterministic eval cloud: a regular grid of UV points per patch, with
// Jacobians, fundamental forms and analytic normals (zeroed and counted when
// degenerate).
inline PredictedCloud build_eval_cloud(const Atlas& atlas, int grid_res,
                                       int* degenerate_normals = nullptr) {
    PredictedCloud cloud;
    int degen = 0;
    for (int k = 0; k < atlas.arch.patch_count; ++k) {
        for (int i = 0; i < grid_res; ++i) {
            for (int j = 0; j < grid_res; ++j) {
                double u = static_cast<double>(i) / (grid_res - 1);
                double v = static_cast<double>(j) / (grid_res - 1);
                auto jet = decode_jet<double>(atlas.arch, atlas.params, k, u, v);
                PredictedPoint p;
                p.position = jet.p;
                p.patch_id = k;
                p.uv = {u, v};
                p.ju = jet.ju;
                p.jv = jet.jv;
                p.fff = fundamental_form(jet.ju, jet.jv);
                try {
                    p.normal = analytic_normal(jet.ju, jet.jv);
                } catch (const ModelError&) {
                    p.normal = {0, 0, 0};
                    ++degen;
                }
                cloud.points.push_back(p);
            }
        }
    }
    if (degenerate_normals) *degenerate_normals = degen;
    return cloud;
}

inline constexpr double kOverlapThreshold = 0.05;  // t in m_olap^(t)

inline MetricsReport evaluate(const Atlas& atlas, const GroundTruthCloud& gt,
                              const FitConfig& cfg) {
    int degen = 0;
    PredictedCloud cloud = build_eval_cloud(atlas, cfg.eval_grid, &degen);
    MetricsReport rep;
    rep.skipped_normals = degen;
    rep.cd = metric_cd(cloud, gt);
    rep.m_ae = metric_angular_error(cloud, gt);
    rep.m_olap = metric_overlap(cloud, kOverlapThreshold);

    std::vector<double> margin_err;
    if (atlas.arch.patch_count >= 2)
        rep.m_s = metric_stitching(cloud, cfg.margin.r, &margin_err);
    else
        margin_err.assign(static_cast<size_t>(atlas.arch.patch_count), 0.0);

    // per-patch diagnostics: Monte-Carlo grid area and constrained-kNN
    // fallback counts on the eval cloud
    rep.per_patch.resize(static_cast<size_t>(atlas.arch.patch_count));
    int pts_per_patch = cfg.eval_grid * cfg.eval_grid;
    for (int k = 0; k < atlas.arch.patch_count; ++k) {
        std::vector<Fffd> forms;
        forms.reserve(static_cast<size_t>(pts_per_patch));
        for (int i = 0; i < pts_per_patch; ++i)
            forms.push_back(cloud.points[static_cast<size_t>(k * pts_per_patch + i)].fff);
        rep.per_patch[static_cast<size_t>(k)].area = patch_area<double>(forms);
        rep.per_patch[static_cast<size_t>(k)].margin_error =
            margin_err.empty() ? 0.0 : margin_err[static_cast<size_t>(k)];
    }
    auto pos = cloud.positions();
    KdTree gt_tree(gt.points);
    KdTree pred_tree(pos);
    auto assoc = associate_gt(pos, gt, gt_tree);
    for (size_t i = 0; i < pos.size(); ++i) {
        auto res = constrained_knn(pred_tree, assoc.gt_normal, static_cast<int>(i),
                                   cfg.consistency.neighbor_cfg);
        if (res.fallback)
            ++rep.per_patch[static_cast<size_t>(cloud.points[i].patch_id)].fallback_count;
    }
    return rep;
}

// L_sc evaluated on the deterministic grid, for fixture-style comparisons.
inline double eval_surface_consistency(const Atlas& atlas, const GroundTruthCloud& gt,
                                       const ConsistencyConfig& cfg, int grid_res = 16) {
    PredictedCloud cloud = build_eval_cloud(atlas, grid_res);
    return surface_consistency(cloud, gt, cfg);
}

// --- training session ------------------------------------------------------------

struct IterationRecord {
    int iter = 0;
    LossBreakdown loss;
    double wall_ms = 0.0;
};

struct FitResult {
    Atlas atlas;
    std::vector<IterationRecord> history;
    std::vector<std::pair<int, MetricsReport>> eval_reports;
    MetricsReport final_report;
};

// One fitting run. Value semantics: copying a session and advancing the
// copies with different variants realizes "same pretrained state" ablations.
class FitSession {
public:
    FitSession(GroundTruthCloud gt, FitConfig cfg)
        : gt_(std::move(gt)), cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        if (gt_.points.size() < 4) throw FitError("fit: ground truth needs >= 4 points");
        atlas_ = init_atlas(cfg_, rng_);
        opt_ = OptimizerState(atlas_.params.size());
        gt_tree_ = std::make_shared<KdTree>(gt_.points);
    }

    const Atlas& atlas() const { return atlas_; }
    Atlas& atlas_mutable() { return atlas_; }
    const FitConfig& config() const { return cfg_; }
    void set_variant(Variant v) { cfg_.variant = v; }
    int iteration() const { return iter_; }
    const std::vector<IterationRecord>& history() const { return history_; }

    void run(int iters) {
        for (int i = 0; i < iters; ++i) step();
    }

    void run_to(int target) {
        while (iter_ < target) step();
    }

    MetricsReport evaluate_now() const { return evaluate(atlas_, gt_, cfg_); }

    void step() {
        auto t0 = std::chrono::steady_clock::now();
        ++iter_;
        bool pretrain = iter_ <= cfg_.effective_pretrain();
        LossWeights w = phase_weights(cfg_, pretrain);
        ConsistencyConfig ccfg = effective_consistency(cfg_);
        const int K = cfg_.patch_count, M = cfg_.samples_per_patch;
        const bool want_sc = w.alpha_sc > 0.0;
        const bool want_st = w.alpha_st > 0.0;

        Tape tape;
        std::vector<Var> pvars;
        pvars.reserve(atlas_.params.size());
        for (double p : atlas_.params) pvars.push_back(tape.input(p));
        std::span<const Var> pspan(pvars);

        // fresh UV draw (held fixed between neighbor-structure rebuilds)
        bool rebuild = (iter_ - 1) % cfg_.rebuild_every == 0 || uv_.empty();
        if (rebuild) {
            uv_.clear();
            for (int k = 0; k < K; ++k) {
                auto s = sample_uv(M, UvStrategy::UniformRandom, rng_);
                uv_.insert(uv_.end(), s.begin(), s.end());
            }
            margin_uv_.clear();
            if (want_st) {
                for (int k = 0; k < K; ++k) {
                    auto s = sample_margin(cfg_.margin, cfg_.effective_margin_count(), rng_);
                    margin_uv_.insert(margin_uv_.end(), s.begin(), s.end());
                }
            }
        }

        // decode all samples with tangents
        PredictedCloud cloud;
        cloud.points.resize(static_cast<size_t>(K * M));
        std::vector<Vec3<Var>> pos_v(static_cast<size_t>(K * M));
        std::vector<Vec3<Var>> normal_v;
        std::vector<Fff<Var>> forms(static_cast<size_t>(K * M));
        std::vector<int> patch_of(static_cast<size_t>(K * M));
        bool analytic_sc = want_sc && ccfg.normal_mode == NormalMode::Analytic;
        if (analytic_sc) normal_v.resize(static_cast<size_t>(K * M));
        for (int k = 0; k < K; ++k) {
            for (int i = 0; i < M; ++i) {
                size_t idx = static_cast<size_t>(k * M + i);
                const Vec2d& q = uv_[idx];
                auto jet = decode_jet<Var>(atlas_.arch, pspan, k, q.u, q.v);
                pos_v[idx] = jet.p;
                forms[idx] = fundamental_form(jet.ju, jet.jv);
                patch_of[idx] = k;
                PredictedPoint& pp = cloud.points[idx];
                pp.position = {jet.p.x.value(), jet.p.y.value(), jet.p.z.value()};
                pp.patch_id = k;
                pp.uv = q;
                pp.ju = {jet.ju.x.value(), jet.ju.y.value(), jet.ju.z.value()};
                pp.jv = {jet.jv.x.value(), jet.jv.y.value(), jet.jv.z.value()};
                pp.fff = {forms[idx].E.value(), forms[idx].F.value(), forms[idx].G.value()};
                if (analytic_sc) {
                    normal_v[idx] = analytic_normal(jet.ju, jet.jv);
                    pp.normal = {normal_v[idx].x.value(), normal_v[idx].y.value(),
                                 normal_v[idx].z.value()};
                } else {
                    try {
                        pp.normal = analytic_normal(pp.ju, pp.jv);
                    } catch (const ModelError&) {
                        pp.normal = {0, 0, 0};  // collapsed sample; only diagnostics use it
                    }
                }
            }
        }

        auto pos = cloud.positions();
        KdTree pred_tree(pos);

        struct Term {
            const char* name;
            Var var;
            double weight;
        };
        std::vector<Term> terms;

        auto chd_plan = plan_chamfer(pos, *gt_tree_, pred_tree);
        Var chd = chamfer_eval<Var>(std::span<const Vec3<Var>>(pos_v), gt_, chd_plan);

        std::vector<Var> areas;
        areas.reserve(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k)
            areas.push_back(patch_area<Var>(std::span<const Fff<Var>>(
                forms.data() + static_cast<size_t>(k) * static_cast<size_t>(M),
                static_cast<size_t>(M))));
        auto [l_e, l_g] = distortion<Var>(forms, patch_of, areas);
        Var l_sk = skew<Var>(forms, patch_of, areas);
        Var l_ol = overlap<Var>(areas, gt_.area);

        LossBreakdown bd;
        bd.chd = chd.value();
        bd.l_E = l_e.value();
        bd.l_G = l_g.value();
        bd.l_sk = l_sk.value();
        bd.l_ol = l_ol.value();

        Var total = chd;
        terms.push_back({"chamfer", chd, 1.0});
        if (w.alpha_E > 0.0) { total += w.alpha_E * l_e; terms.push_back({"distortion_E", l_e, w.alpha_E}); }
        if (w.alpha_G > 0.0) { total += w.alpha_G * l_g; terms.push_back({"distortion_G", l_g, w.alpha_G}); }
        if (w.alpha_sk > 0.0) { total += w.alpha_sk * l_sk; terms.push_back({"skew", l_sk, w.alpha_sk}); }
        if (w.alpha_ol > 0.0) { total += w.alpha_ol * l_ol; terms.push_back({"overlap", l_ol, w.alpha_ol}); }

        if (want_sc) {
            auto assoc = associate_gt(pos, gt_, *gt_tree_);
            auto plan = plan_consistency(cloud, assoc, ccfg);
            Var l_sc = surface_consistency_eval<Var>(
                std::span<const Vec3<Var>>(pos_v),
                std::span<const Vec3<Var>>(normal_v), plan, ccfg);
            bd.l_sc = l_sc.value();
            total += w.alpha_sc * l_sc;
            terms.push_back({"surface_consistency", l_sc, w.alpha_sc});
            last_fallback_count_ = plan.fallback_count;
            last_skipped_count_ = plan.skipped_count;
        }

        if (want_st) {
            size_t n_margin = margin_uv_.size();
            std::vector<Vec3<Var>> margin_v(n_margin);
            std::vector<Vec3d> margin_pos(n_margin);
            std::vector<int> margin_patch(n_margin);
            int mc = cfg_.effective_margin_count();
            for (size_t i = 0; i < n_margin; ++i) {
                int k = static_cast<int>(i) / mc;
                margin_v[i] = decode<Var>(atlas_.arch, pspan, k, margin_uv_[i].u,
                                          margin_uv_[i].v);
                margin_pos[i] = {margin_v[i].x.value(), margin_v[i].y.value(),
                                 margin_v[i].z.value()};
                margin_patch[i] = k;
            }
            auto plan = plan_stitching(margin_pos, margin_patch, pos, patch_of, K);
            Var l_st = stitching_eval<Var>(std::span<const Vec3<Var>>(margin_v),
                                           std::span<const Vec3<Var>>(pos_v), plan);
            bd.l_st = l_st.value();
            total += w.alpha_st * l_st;
            terms.push_back({"stitching", l_st, w.alpha_st});
        }

        bd.total = total.value();

        auto grad = tape.gradient(total, atlas_.params.size());
        for (double g : grad) {
            if (!std::isfinite(g)) {
                // trace the offending term for the diagnostic
                for (const Term& t : terms) {
                    auto tg = tape.gradient(t.var, atlas_.params.size());
                    for (double x : tg)
                        if (!std::isfinite(x))
                            throw FitError(std::string("fit: non-finite gradient from loss term '") +
                                           t.name + "' at iteration " + std::to_string(iter_));
                }
                throw FitError("fit: non-finite gradient at iteration " + std::to_string(iter_));
            }
        }
        optimizer_step(opt_, atlas_.params, grad, cfg_.learning_rate, cfg_.beta1,
                       cfg_.beta2, cfg_.epsilon);

        auto t1 = std::chrono::steady_clock::now();
        IterationRecord rec;
        rec.iter = iter_;
        rec.loss = bd;
        rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        history_.push_back(rec);

        if (iter_ == cfg_.effective_pretrain() ||
            (cfg_.effective_pretrain() == 0 && iter_ == 1))
            guard_.set_reference(bd.total);
        else if (guard_.feed(bd.total))
            throw FitError("fit: diverged (total loss > 1000x pretrain level for 100 "
                           "consecutive iterations, iteration " + std::to_string(iter_) + ")");
    }

    int last_fallback_count() const { return last_fallback_count_; }
    int last_skipped_count() const { return last_skipped_count_; }

private:
    GroundTruthCloud gt_;
    FitConfig cfg_;
    Rng rng_;
    Atlas atlas_;
    OptimizerState opt_{0};
    std::shared_ptr<const KdTree> gt_tree_;  // GT is static; shared across copies
    std::vector<IterationRecord> history_;
    std::vector<Vec2d> uv_, margin_uv_;
    DivergenceGuard guard_;
    int iter_ = 0;
    int last_fallback_count_ = 0;
    int last_skipped_count_ = 0;
};

inline FitResult fit(const GroundTruthCloud& gt, const FitConfig& cfg) {
    FitSession session(gt, cfg);
    FitResult out;
    while (session.iteration() < cfg.total_iters) {
        session.step();
        if (session.iteration() % cfg.eval_every == 0 &&
            session.iteration() < cfg.total_iters)
            out.eval_reports.push_back({session.iteration(), session.evaluate_now()});
    }
    out.atlas = session.atlas();
    out.history = session.history();
    out.final_report = session.evaluate_now();
    out.eval_reports.push_back({cfg.total_iters, out.final_report});
    return out;
}

}  // namespace patchfit
