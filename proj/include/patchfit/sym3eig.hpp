#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "patchfit/vec.hpp"

namespace patchfit {

// Symmetric 3x3 matrix stored as (xx, xy, xz, yy, yz, zz).
using Sym3 = std::array<double, 6>;

struct Sym3Eig {
    std::array<double, 3> lambda;  // ascending
    std::array<Vec3d, 3> vec;      // unit eigenvectors, vec[i] for lambda[i]
};

namespace detail {

inline Vec3d row(const Sym3& a, int i) {
    if (i == 0) return {a[0], a[1], a[2]};
    if (i == 1) return {a[1], a[3], a[4]};
    return {a[2], a[4], a[5]};
}

// Eigenvector of (a - lambda I) via the largest cross product of its rows.
// Returns false when all crosses are numerically zero (repeated eigenvalue).
inline bool null_vector(const Sym3& a, double lambda, Vec3d& out) {
    Sym3 b = a;
    b[0] -= lambda;
    b[3] -= lambda;
    b[5] -= lambda;
    Vec3d r0 = row(b, 0), r1 = row(b, 1), r2 = row(b, 2);
    Vec3d c01 = cross(r0, r1), c02 = cross(r0, r2), c12 = cross(r1, r2);
    double n01 = dot(c01, c01), n02 = dot(c02, c02), n12 = dot(c12, c12);
    Vec3d best = c01;
    double nb = n01;
    if (n02 > nb) { best = c02; nb = n02; }
    if (n12 > nb) { best = c12; nb = n12; }
    if (nb < 1e-40) return false;
    out = best * (1.0 / std::sqrt(nb));
    return true;
}

}  // namespace detail

// Closed-form eigen decomposition of a symmetric 3x3 matrix
// (trigonometric solution of the characteristic polynomial).
inline Sym3Eig sym3_eigen(const Sym3& a) {
    Sym3Eig out;
    double p1 = a[1] * a[1] + a[2] * a[2] + a[4] * a[4];
    double q = (a[0] + a[3] + a[5]) / 3.0;
    double d0 = a[0] - q, d1 = a[3] - q, d2 = a[5] - q;
    double p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
    double p = std::sqrt(std::max(p2 / 6.0, 0.0));

    if (p < 1e-300) {
        // scalar multiple of identity
        out.lambda = {q, q, q};
        out.vec = {Vec3d{1, 0, 0}, Vec3d{0, 1, 0}, Vec3d{0, 0, 1}};
        return out;
    }

    // r = det((A - qI)/p) / 2, clamped against roundoff
    double inv = 1.0 / p;
    double b0 = d0 * inv, b1 = a[1] * inv, b2 = a[2] * inv;
    double b3 = d1 * inv, b4 = a[4] * inv, b5 = d2 * inv;
    double detb = b0 * (b3 * b5 - b4 * b4) - b1 * (b1 * b5 - b4 * b2) +
                  b2 * (b1 * b4 - b3 * b2);
    double r = std::clamp(detb / 2.0, -1.0, 1.0);
    double phi = std::acos(r) / 3.0;

    double l2 = q + 2.0 * p * std::cos(phi);
    double l0 = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
    double l1 = 3.0 * q - l0 - l2;
    out.lambda = {l0, l1, l2};

    Vec3d vmin, vmax;
    bool ok_min = detail::null_vector(a, l0, vmin);
    bool ok_max = detail::null_vector(a, l2, vmax);
    if (ok_min && ok_max) {
        out.vec[0] = vmin;
        out.vec[2] = vmax;
        out.vec[1] = normalized(cross(vmax, vmin));
    } else if (ok_min) {
        // top pair repeated: complete an orthonormal frame around vmin
        Vec3d t = std::abs(vmin.x) < 0.9 ? Vec3d{1, 0, 0} : Vec3d{0, 1, 0};
        out.vec[0] = vmin;
        out.vec[1] = normalized(cross(vmin, t));
        out.vec[2] = normalized(cross(vmin, out.vec[1]));
    } else if (ok_max) {
        Vec3d t = std::abs(vmax.x) < 0.9 ? Vec3d{1, 0, 0} : Vec3d{0, 1, 0};
        out.vec[2] = vmax;
        out.vec[1] = normalized(cross(vmax, t));
        out.vec[0] = normalized(cross(vmax, out.vec[1]));
    } else {
        out.vec = {Vec3d{1, 0, 0}, Vec3d{0, 1, 0}, Vec3d{0, 0, 1}};
    }
    return out;
}

}  // namespace patchfit
