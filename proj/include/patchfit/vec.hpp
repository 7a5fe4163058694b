#pragma once

#include <array>
#include <cmath>

namespace patchfit {

template <class S>
struct Vec3 {
    S x{}, y{}, z{};

    bool operator==(const Vec3&) const = default;
};

using Vec3d = Vec3<double>;

struct Vec2d {
    double u = 0.0, v = 0.0;
};

template <class S>
Vec3<S> operator+(const Vec3<S>& a, const Vec3<S>& b) {
    return {a.x + b.x, a.y + b.y, a.z + b.z};
}

template <class S>
Vec3<S> operator-(const Vec3<S>& a, const Vec3<S>& b) {
    return {a.x - b.x, a.y - b.y, a.z - b.z};
}

template <class S, class T>
auto operator*(const Vec3<S>& a, T s) -> Vec3<decltype(a.x * s)> {
    return {a.x * s, a.y * s, a.z * s};
}

template <class S>
S dot(const Vec3<S>& a, const Vec3<S>& b) {
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class S>
Vec3<S> cross(const Vec3<S>& a, const Vec3<S>& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

inline double norm(const Vec3d& a) { return std::sqrt(dot(a, a)); }

inline double dist2(const Vec3d& a, const Vec3d& b) { return dot(a - b, a - b); }

inline Vec3d normalized(const Vec3d& a) {
    double n = norm(a);
    return {a.x / n, a.y / n, a.z / n};
}

// First fundamental form of a mapping at one UV point.
template <class S>
struct Fff {
    S E{}, F{}, G{};
};

using Fffd = Fff<double>;

}  // namespace patchfit
