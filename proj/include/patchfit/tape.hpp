#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "patchfit/sym3eig.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stable scalar versions, shared with the plain (double) evaluation path.
inline double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

// sqrt(max(0, x)); the gradient is defined to vanish near zero so the
// Monte-Carlo area of a collapsed patch stays differentiable.
inline constexpr double kSqrtClampEps = 1e-24;

inline double sqrt_clamped(double x) { return std::sqrt(std::max(0.0, x)); }

class Tape;

struct Var {
    int32_t idx = -1;
    Tape* tape = nullptr;
    double value() const;
};

// Reverse-mode tape over 64-bit scalars. Nodes store precomputed local
// partials in CSR layout; the backward sweep is a single reverse pass with
// a fixed (index-order) reduction, so gradients are bit-reproducible.
class Tape {
public:
    Var input(double v) {
        if (!std::isfinite(v)) throw NumericError("tape: non-finite input value");
        return raw_leaf(v);
    }

    Var constant(double v) {
        if (!std::isfinite(v)) throw NumericError("tape: non-finite constant");
        return raw_leaf(v);
    }

    double val(int32_t i) const { return val_[static_cast<size_t>(i)]; }
    size_t size() const { return val_.size(); }

    void clear() {
        val_.clear();
        edge_end_.clear();
        parent_.clear();
        partial_.clear();
    }

    Var push1(double v, const char* op, int32_t a, double pa) {
        check(v, op);
        parent_.push_back(a);
        partial_.push_back(pa);
        return finish(v);
    }

    Var push2(double v, const char* op, int32_t a, double pa, int32_t b, double pb) {
        check(v, op);
        parent_.push_back(a);
        partial_.push_back(pa);
        parent_.push_back(b);
        partial_.push_back(pb);
        return finish(v);
    }

    Var push_n(double v, const char* op, std::span<const int32_t> parents,
               std::span<const double> partials) {
        check(v, op);
        parent_.insert(parent_.end(), parents.begin(), parents.end());
        partial_.insert(partial_.end(), partials.begin(), partials.end());
        return finish(v);
    }

    // Gradient of `root` with respect to the first n_inputs leaves.
    std::vector<double> gradient(Var root, size_t n_inputs) const {
        std::vector<double> adj(val_.size(), 0.0);
        adj[static_cast<size_t>(root.idx)] = 1.0;
        for (int32_t i = root.idx; i >= 0; --i) {
            double a = adj[static_cast<size_t>(i)];
            if (a == 0.0) continue;
            uint32_t lo = i > 0 ? edge_end_[static_cast<size_t>(i) - 1] : 0;
            uint32_t hi = edge_end_[static_cast<size_t>(i)];
            for (uint32_t e = lo; e < hi; ++e)
                adj[static_cast<size_t>(parent_[e])] += partial_[e] * a;
        }
        adj.resize(n_inputs);
        return adj;
    }

private:
    Var raw_leaf(double v) {
        val_.push_back(v);
        edge_end_.push_back(static_cast<uint32_t>(parent_.size()));
        return Var{static_cast<int32_t>(val_.size() - 1), this};
    }

    void check(double v, const char* op) {
        if (!std::isfinite(v))
            throw NumericError(std::string("tape: non-finite result in primitive '") + op + "'");
    }

    Var finish(double v) {
        val_.push_back(v);
        edge_end_.push_back(static_cast<uint32_t>(parent_.size()));
        return Var{static_cast<int32_t>(val_.size() - 1), this};
    }

    std::vector<double> val_;
    std::vector<uint32_t> edge_end_;
    std::vector<int32_t> parent_;
    std::vector<double> partial_;
};

inline double Var::value() const { return tape->val(idx); }

inline double value_of(double x) { return x; }
inline double value_of(Var v) { return v.value(); }

// --- arithmetic -----------------------------------------------------------

inline Var operator+(Var a, Var b) {
    return a.tape->push2(a.value() + b.value(), "add", a.idx, 1.0, b.idx, 1.0);
}
inline Var operator+(Var a, double c) {
    return a.tape->push1(a.value() + c, "add", a.idx, 1.0);
}
inline Var operator+(double c, Var a) { return a + c; }

inline Var operator-(Var a, Var b) {
    return a.tape->push2(a.value() - b.value(), "sub", a.idx, 1.0, b.idx, -1.0);
}
inline Var operator-(Var a, double c) {
    return a.tape->push1(a.value() - c, "sub", a.idx, 1.0);
}
inline Var operator-(double c, Var a) {
    return a.tape->push1(c - a.value(), "sub", a.idx, -1.0);
}
inline Var operator-(Var a) {
    return a.tape->push1(-a.value(), "neg", a.idx, -1.0);
}

inline Var operator*(Var a, Var b) {
    return a.tape->push2(a.value() * b.value(), "mul", a.idx, b.value(), b.idx, a.value());
}
inline Var operator*(Var a, double c) {
    return a.tape->push1(a.value() * c, "mul", a.idx, c);
}
inline Var operator*(double c, Var a) { return a * c; }

inline Var operator/(Var a, Var b) {
    double bv = b.value();
    double v = a.value() / bv;
    return a.tape->push2(v, "div", a.idx, 1.0 / bv, b.idx, -v / bv);
}
inline Var operator/(Var a, double c) { return a * (1.0 / c); }
inline Var operator/(double c, Var a) {
    double av = a.value();
    return a.tape->push1(c / av, "div", a.idx, -c / (av * av));
}

inline Var& operator+=(Var& a, Var b) { a = a + b; return a; }

// --- nonlinearities -------------------------------------------------------

inline Var softplus(Var x) {
    return x.tape->push1(softplus(x.value()), "softplus", x.idx, sigmoid(x.value()));
}

inline Var sigmoid(Var x) {
    double s = sigmoid(x.value());
    return x.tape->push1(s, "sigmoid", x.idx, s * (1.0 - s));
}

inline Var relu(Var x) {
    double v = x.value();
    return x.tape->push1(relu(v), "relu", x.idx, v > 0.0 ? 1.0 : 0.0);
}

inline Var sqrt_clamped(Var x) {
    double v = x.value();
    double s = sqrt_clamped(v);
    double d = v > kSqrtClampEps ? 0.5 / s : 0.0;
    return x.tape->push1(s, "sqrt_clamped", x.idx, d);
}

inline Var sqrt_pos(Var x) {
    double s = std::sqrt(x.value());
    return x.tape->push1(s, "sqrt", x.idx, 0.5 / s);
}
inline double sqrt_pos(double x) { return std::sqrt(x); }

// --- fused reductions (fixed index-order, fewer nodes) ---------------------

inline double vsum(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
}

inline Var vsum(std::span<const Var> xs) {
    Tape* t = xs[0].tape;
    double s = 0.0;
    thread_local std::vector<int32_t> ps;
    thread_local std::vector<double> ws;
    ps.clear();
    ws.clear();
    for (Var x : xs) {
        s += x.value();
        ps.push_back(x.idx);
        ws.push_back(1.0);
    }
    return t->push_n(s, "sum", ps, ws);
}

// b + sum_i w_i * x_i, the affine-layer workhorse.
inline double affine(std::span<const double> w, std::span<const double> x, double b) {
    double s = b;
    for (size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    return s;
}

inline Var affine(std::span<const Var> w, std::span<const Var> x, Var b) {
    Tape* t = b.tape;
    double s = b.value();
    thread_local std::vector<int32_t> ps;
    thread_local std::vector<double> pw;
    ps.clear();
    pw.clear();
    ps.push_back(b.idx);
    pw.push_back(1.0);
    for (size_t i = 0; i < w.size(); ++i) {
        double wv = w[i].value(), xv = x[i].value();
        s += wv * xv;
        ps.push_back(w[i].idx);
        pw.push_back(xv);
        ps.push_back(x[i].idx);
        pw.push_back(wv);
    }
    return t->push_n(s, "affine", ps, pw);
}

inline double dot_span(std::span<const double> w, std::span<const double> x) {
    double s = 0.0;
    for (size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    return s;
}

inline Var dot_span(std::span<const Var> w, std::span<const Var> x) {
    Tape* t = w[0].tape;
    double s = 0.0;
    thread_local std::vector<int32_t> ps;
    thread_local std::vector<double> pw;
    ps.clear();
    pw.clear();
    for (size_t i = 0; i < w.size(); ++i) {
        double wv = w[i].value(), xv = x[i].value();
        s += wv * xv;
        ps.push_back(w[i].idx);
        pw.push_back(xv);
        ps.push_back(x[i].idx);
        pw.push_back(wv);
    }
    return t->push_n(s, "dot", ps, pw);
}

// --- smallest eigenvector of a symmetric 3x3 -------------------------------

inline constexpr double kEigenGapEps = 1e-6;

struct EigvecResult {
    Vec3d vec;
    double gap;  // lambda_mid - lambda_min
};

inline EigvecResult smallest_eigenvector(const Sym3& c) {
    Sym3Eig e = sym3_eigen(c);
    return {e.vec[0], e.lambda[1] - e.lambda[0]};
}

// Tape version: value from the closed-form solver; backward pass via the
// eigenvector perturbation formula, zeroed when the eigen-gap is below
// kEigenGapEps.
inline std::pair<Vec3<Var>, double> smallest_eigenvector(const std::array<Var, 6>& c) {
    Tape* t = c[0].tape;
    Sym3 cv;
    for (int i = 0; i < 6; ++i) cv[static_cast<size_t>(i)] = c[static_cast<size_t>(i)].value();
    Sym3Eig e = sym3_eigen(cv);
    double gap = e.lambda[1] - e.lambda[0];

    // component (a,b) of the symmetric parameter layout
    static constexpr int kA[6] = {0, 0, 0, 1, 1, 2};
    static constexpr int kB[6] = {0, 1, 2, 1, 2, 2};
    auto comp = [](const Vec3d& v, int i) { return i == 0 ? v.x : (i == 1 ? v.y : v.z); };

    std::array<int32_t, 6> ps;
    for (int i = 0; i < 6; ++i) ps[static_cast<size_t>(i)] = c[static_cast<size_t>(i)].idx;

    Vec3<Var> out;
    for (int i = 0; i < 3; ++i) {
        std::array<double, 6> pw{};
        if (gap >= kEigenGapEps) {
            for (int p = 0; p < 6; ++p) {
                int a = kA[p], b = kB[p];
                double d = 0.0;
                for (int j = 1; j < 3; ++j) {
                    double inner = a == b
                        ? comp(e.vec[static_cast<size_t>(j)], a) * comp(e.vec[0], a)
                        : comp(e.vec[static_cast<size_t>(j)], a) * comp(e.vec[0], b) +
                          comp(e.vec[static_cast<size_t>(j)], b) * comp(e.vec[0], a);
                    d += comp(e.vec[static_cast<size_t>(j)], i) * inner /
                         (e.lambda[0] - e.lambda[static_cast<size_t>(j)]);
                }
                pw[static_cast<size_t>(p)] = d;
            }
        }
        Var vi = t->push_n(comp(e.vec[0], i), "smallest_eigenvector", ps, pw);
        if (i == 0) out.x = vi;
        if (i == 1) out.y = vi;
        if (i == 2) out.z = vi;
    }
    return {out, gap};
}

// --- driver helpers ---------------------------------------------------------

// Builds the objective graph on a fresh tape with `params` as the leading
// leaves and returns (value, reverse-mode gradient).
template <class Build>
std::pair<double, std::vector<double>> value_and_grad(Build&& build,
                                                      std::span<const double> params) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (double p : params) vars.push_back(tape.input(p));
    Var obj = build(tape, std::span<const Var>(vars));
    return {obj.value(), tape.gradient(obj, params.size())};
}

// Central-difference oracle: (f(x + h e_i) - f(x - h e_i)) / 2h.
template <class F>
std::vector<double> finite_diff_grad(F&& f, std::span<const double> params, double h) {
    if (!(h > 0.0)) throw NumericError("finite_diff_grad: h must be positive");
    std::vector<double> x(params.begin(), params.end());
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double xi = x[i];
        x[i] = xi + h;
        double fp = f(std::span<const double>(x));
        x[i] = xi - h;
        double fm = f(std::span<const double>(x));
        x[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_grad: non-finite evaluation");
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace patchfit
