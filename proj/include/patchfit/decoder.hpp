#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "patchfit/rng.hpp"
#include "patchfit/tape.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 4-layer MLP decoder per patch: Softplus on the first three layers,
// linear head. Input is (u, v) plus an optional shared latent code.
struct AtlasArch {
    int patch_count = 1;   // K
    int hidden = 128;      // H
    int latent_dim = 0;    // D
};

inline int decoder_param_count(const AtlasArch& a) {
    int in = 2 + a.latent_dim, h = a.hidden;
    return h * in + h + 2 * (h * h + h) + 3 * h + 3;
}

inline int atlas_param_count(const AtlasArch& a) {
    return a.patch_count * decoder_param_count(a) + a.latent_dim;
}

// All weights and biases of all K decoders concatenated, per decoder:
// W0 (H x (2+D), row-major), b0, W1 (H x H), b1, W2, b2, W3 (3 x H), b3;
// a shared latent code (if any) sits at the very end of the buffer.
struct Atlas {
    AtlasArch arch;
    std::vector<double> params;

    int param_count() const { return atlas_param_count(arch); }
};

// Glorot-uniform weights, zero biases, zero latent code.
inline Atlas init_atlas(const AtlasArch& arch, Rng& rng) {
    Atlas atlas{arch, std::vector<double>(static_cast<size_t>(atlas_param_count(arch)), 0.0)};
    int per = decoder_param_count(arch);
    int h = arch.hidden, in0 = 2 + arch.latent_dim;
    const int rows[4] = {h, h, h, 3};
    const int cols[4] = {in0, h, h, h};
    for (int k = 0; k < arch.patch_count; ++k) {
        size_t off = static_cast<size_t>(k) * static_cast<size_t>(per);
        for (int l = 0; l < 4; ++l) {
            double bound = std::sqrt(6.0 / (rows[l] + cols[l]));
            for (int i = 0; i < rows[l] * cols[l]; ++i)
                atlas.params[off + static_cast<size_t>(i)] = rng.uniform(-bound, bound);
            off += static_cast<size_t>(rows[l] * cols[l] + rows[l]);  // biases stay zero
        }
    }
    return atlas;
}

namespace detail {

inline double make_const(double c, double) { return c; }
inline Var make_const(double c, Var like) { return like.tape->constant(c); }

}  // namespace detail

template <class S>
struct Jet {
    Vec3<S> p, ju, jv;
};

// Forward pass with UV tangents: returns the decoded point together with
// the exact Jacobian columns d p / d u and d p / d v. The tangents ride
// through the same graph, so for S = Var they stay differentiable with
// respect to the parameters.
template <class S>
Jet<S> decode_jet(const AtlasArch& arch, std::span<const S> params, int patch_id,
                  double u, double v) {
    if (patch_id < 0 || patch_id >= arch.patch_count)
        throw ModelError("decode: patch_id out of range");
    const int h = arch.hidden, d = arch.latent_dim, in0 = 2 + d;
    const int per = decoder_param_count(arch);
    size_t off = static_cast<size_t>(patch_id) * static_cast<size_t>(per);

    std::vector<S> x(static_cast<size_t>(in0));
    x[0] = detail::make_const(u, params[0]);
    x[1] = detail::make_const(v, params[0]);
    for (int i = 0; i < d; ++i)
        x[static_cast<size_t>(2 + i)] =
            params[static_cast<size_t>(arch.patch_count * per + i)];

    std::vector<S> a(static_cast<size_t>(h)), au(static_cast<size_t>(h)),
        av(static_cast<size_t>(h)), y(static_cast<size_t>(h)), yu(static_cast<size_t>(h)),
        yv(static_cast<size_t>(h));

    // layer 0: tangents are just the first two weight columns
    for (int i = 0; i < h; ++i) {
        std::span<const S> w(params.data() + off + static_cast<size_t>(i * in0),
                             static_cast<size_t>(in0));
        S b = params[off + static_cast<size_t>(h * in0 + i)];
        S pre = affine(w, std::span<const S>(x), b);
        S s = sigmoid(pre);
        a[static_cast<size_t>(i)] = softplus(pre);
        au[static_cast<size_t>(i)] = s * w[0];
        av[static_cast<size_t>(i)] = s * w[1];
    }
    off += static_cast<size_t>(h * in0 + h);

    for (int layer = 1; layer <= 2; ++layer) {
        for (int i = 0; i < h; ++i) {
            std::span<const S> w(params.data() + off + static_cast<size_t>(i * h),
                                 static_cast<size_t>(h));
            S b = params[off + static_cast<size_t>(h * h + i)];
            y[static_cast<size_t>(i)] = affine(w, std::span<const S>(a), b);
            yu[static_cast<size_t>(i)] = dot_span(w, std::span<const S>(au));
            yv[static_cast<size_t>(i)] = dot_span(w, std::span<const S>(av));
        }
        for (int i = 0; i < h; ++i) {
            S s = sigmoid(y[static_cast<size_t>(i)]);
            a[static_cast<size_t>(i)] = softplus(y[static_cast<size_t>(i)]);
            au[static_cast<size_t>(i)] = s * yu[static_cast<size_t>(i)];
            av[static_cast<size_t>(i)] = s * yv[static_cast<size_t>(i)];
        }
        off += static_cast<size_t>(h * h + h);
    }

    Jet<S> out;
    S* pc[3] = {&out.p.x, &out.p.y, &out.p.z};
    S* uc[3] = {&out.ju.x, &out.ju.y, &out.ju.z};
    S* vc[3] = {&out.jv.x, &out.jv.y, &out.jv.z};
    for (int i = 0; i < 3; ++i) {
        std::span<const S> w(params.data() + off + static_cast<size_t>(i * h),
                             static_cast<size_t>(h));
        S b = params[off + static_cast<size_t>(3 * h + i)];
        *pc[i] = affine(w, std::span<const S>(a), b);
        *uc[i] = dot_span(w, std::span<const S>(au));
        *vc[i] = dot_span(w, std::span<const S>(av));
    }
    return out;
}

// Value-only forward pass (margin points, eval grids).
template <class S>
Vec3<S> decode(const AtlasArch& arch, std::span<const S> params, int patch_id,
               double u, double v) {
    if (patch_id < 0 || patch_id >= arch.patch_count)
        throw ModelError("decode: patch_id out of range");
    const int h = arch.hidden, d = arch.latent_dim, in0 = 2 + d;
    const int per = decoder_param_count(arch);
    size_t off = static_cast<size_t>(patch_id) * static_cast<size_t>(per);

    std::vector<S> x(static_cast<size_t>(in0));
    x[0] = detail::make_const(u, params[0]);
    x[1] = detail::make_const(v, params[0]);
    for (int i = 0; i < d; ++i)
        x[static_cast<size_t>(2 + i)] =
            params[static_cast<size_t>(arch.patch_count * per + i)];

    std::vector<S> a(static_cast<size_t>(h)), y(static_cast<size_t>(h));
    for (int i = 0; i < h; ++i) {
        std::span<const S> w(params.data() + off + static_cast<size_t>(i * in0),
                             static_cast<size_t>(in0));
        a[static_cast<size_t>(i)] =
            softplus(affine(w, std::span<const S>(x), params[off + static_cast<size_t>(h * in0 + i)]));
    }
    off += static_cast<size_t>(h * in0 + h);
    for (int layer = 1; layer <= 2; ++layer) {
        for (int i = 0; i < h; ++i) {
            std::span<const S> w(params.data() + off + static_cast<size_t>(i * h),
                                 static_cast<size_t>(h));
            y[static_cast<size_t>(i)] =
                affine(w, std::span<const S>(a), params[off + static_cast<size_t>(h * h + i)]);
        }
        for (int i = 0; i < h; ++i) a[static_cast<size_t>(i)] = softplus(y[static_cast<size_t>(i)]);
        off += static_cast<size_t>(h * h + h);
    }
    Vec3<S> p;
    S* pc[3] = {&p.x, &p.y, &p.z};
    for (int i = 0; i < 3; ++i) {
        std::span<const S> w(params.data() + off + static_cast<size_t>(i * h),
                             static_cast<size_t>(h));
        *pc[i] = affine(w, std::span<const S>(a), params[off + static_cast<size_t>(3 * h + i)]);
    }
    return p;
}

inline Vec3d decode(const Atlas& atlas, int patch_id, const Vec2d& uv) {
    return decode<double>(atlas.arch, atlas.params, patch_id, uv.u, uv.v);
}

inline Jet<double> jacobian(const Atlas& atlas, int patch_id, const Vec2d& uv) {
    return decode_jet<double>(atlas.arch, atlas.params, patch_id, uv.u, uv.v);
}

template <class S>
Fff<S> fundamental_form(const Vec3<S>& ju, const Vec3<S>& jv) {
    return Fff<S>{dot(ju, ju), dot(ju, jv), dot(jv, jv)};
}

inline constexpr double kDegenerateNormalEps = 1e-12;

// Unit normal from the Jacobian columns; errors out on a collapsed or
// creased patch (|ju x jv| below kDegenerateNormalEps).
template <class S>
Vec3<S> analytic_normal(const Vec3<S>& ju, const Vec3<S>& jv) {
    Vec3<S> c = cross(ju, jv);
    double n2 = value_of(c.x) * value_of(c.x) + value_of(c.y) * value_of(c.y) +
                value_of(c.z) * value_of(c.z);
    if (std::sqrt(n2) <= kDegenerateNormalEps)
        throw ModelError("analytic_normal: degenerate jacobian (collapsed patch)");
    S inv = 1.0 / sqrt_pos(dot(c, c));
    return {c.x * inv, c.y * inv, c.z * inv};
}

// Monte-Carlo surface area over the unit UV square: mean sqrt(EG - F^2).
template <class S>
S patch_area(std::span<const Fff<S>> forms) {
    if (forms.empty()) throw ModelError("patch_area: need at least one sample");
    std::vector<S> el;
    el.reserve(forms.size());
    for (const Fff<S>& f : forms)
        el.push_back(sqrt_clamped(f.E * f.G - f.F * f.F));
    return vsum(std::span<const S>(el)) * (1.0 / static_cast<double>(forms.size()));
}

// --- UV sampling ------------------------------------------------------------

enum class UvStrategy { UniformRandom, RegularGrid };

inline std::vector<Vec2d> sample_uv(int count, UvStrategy strategy, Rng& rng) {
    if (count < 1) throw ModelError("sample_uv: count must be >= 1");
    std::vector<Vec2d> out;
    if (strategy == UvStrategy::RegularGrid) {
        int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
        out.reserve(static_cast<size_t>(g * g));
        for (int i = 0; i < g; ++i)
            for (int j = 0; j < g; ++j)
                out.push_back({g > 1 ? static_cast<double>(i) / (g - 1) : 0.0,
                               g > 1 ? static_cast<double>(j) / (g - 1) : 0.0});
    } else {
        out.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) out.push_back({rng.uniform(), rng.uniform()});
    }
    return out;
}

struct MarginSpec {
    double r = 0.1;  // in [0, 0.5]
};

// Inclusive membership so r = 0.5 covers the whole square.
inline bool in_margin(const Vec2d& q, double r) {
    return q.u <= r || q.u >= 1.0 - r || q.v <= r || q.v >= 1.0 - r;
}

// Uniform sampling over the margin frame by area-weighted choice among its
// four rectangles (bottom, top, left, right); no rejection.
inline std::vector<Vec2d> sample_margin(const MarginSpec& spec, int count, Rng& rng) {
    if (!(spec.r > 0.0)) throw ModelError("sample_margin: empty margin (r = 0)");
    if (spec.r > 0.5) throw ModelError("sample_margin: r must be <= 0.5");
    if (count < 1) throw ModelError("sample_margin: count must be >= 1");
    double r = spec.r;
    double a_strip = r;                    // bottom or top: [0,1] x r
    double a_side = r * (1.0 - 2.0 * r);   // left or right: r x (1-2r)
    double total = 2.0 * a_strip + 2.0 * a_side;
    std::vector<Vec2d> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        double pick = rng.uniform() * total;
        Vec2d q;
        if (pick < a_strip) {  // bottom
            q = {rng.uniform(), rng.uniform() * r};
        } else if (pick < 2.0 * a_strip) {  // top
            q = {rng.uniform(), 1.0 - rng.uniform() * r};
        } else if (pick < 2.0 * a_strip + a_side) {  // left
            q = {rng.uniform() * r, r + rng.uniform() * (1.0 - 2.0 * r)};
        } else {  // right
            q = {1.0 - rng.uniform() * r, r + rng.uniform() * (1.0 - 2.0 * r)};
        }
        out.push_back(q);
    }
    return out;
}

// --- hand-constructed charts ------------------------------------------------

// Overwrites decoder `patch_id` so it realizes p = A * (u, v) + c to within
// ~1e-13: the hidden units run in the asymptotically-linear regime of
// Softplus (large positive bias), and the head subtracts the offset.
inline void set_affine_chart(Atlas& atlas, int patch_id, const double A[3][2],
                             const Vec3d& c) {
    const int h = atlas.arch.hidden, d = atlas.arch.latent_dim, in0 = 2 + d;
    if (h < 2) throw ModelError("set_affine_chart: hidden width must be >= 2");
    const double shift = 30.0;
    size_t off = static_cast<size_t>(patch_id) *
                 static_cast<size_t>(decoder_param_count(atlas.arch));
    double* p = atlas.params.data() + off;

    // layer 0: unit 0 carries u + shift, unit 1 carries v + shift
    std::fill(p, p + h * in0 + h, 0.0);
    p[0 * in0 + 0] = 1.0;
    p[1 * in0 + 1] = 1.0;
    for (int i = 0; i < h; ++i) p[h * in0 + i] = shift;
    p += h * in0 + h;

    // layers 1-2: identity on the first two units, constants elsewhere
    for (int layer = 0; layer < 2; ++layer) {
        std::fill(p, p + h * h + h, 0.0);
        p[0 * h + 0] = 1.0;
        p[1 * h + 1] = 1.0;
        for (int i = 2; i < h; ++i) p[h * h + i] = shift;
        p += h * h + h;
    }

    // linear head: p = A * ((u,v) + shift) + b with the shift folded into b
    std::fill(p, p + 3 * h + 3, 0.0);
    const double cv[3] = {c.x, c.y, c.z};
    for (int i = 0; i < 3; ++i) {
        p[i * h + 0] = A[i][0];
        p[i * h + 1] = A[i][1];
        p[3 * h + i] = cv[i] - shift * (A[i][0] + A[i][1]);
    }
}

// One decoded training sample with its differential-geometry payload.
struct PredictedPoint {
    Vec3d position;
    int patch_id = 0;
    Vec2d uv;
    Vec3d ju, jv;   // Jacobian columns
    Vec3d normal;   // analytic unit normal
    Fffd fff;
};

}  // namespace patchfit
