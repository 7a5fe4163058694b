#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "patchfit/rng.hpp"
#include "patchfit/spatial.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ShapeKind { Plane, Sphere, Torus, Box, PlaneWithHole, TwoSheets };

inline ShapeKind parse_shape_kind(const std::string& s) {
    if (s == "plane") return ShapeKind::Plane;
    if (s == "sphere") return ShapeKind::Sphere;
    if (s == "torus") return ShapeKind::Torus;
    if (s == "box") return ShapeKind::Box;
    if (s == "plane-with-hole") return ShapeKind::PlaneWithHole;
    if (s == "two-sheets") return ShapeKind::TwoSheets;
    throw ShapeError("unknown shape kind: " + s);
}

struct ShapeSpec {
    ShapeKind kind = ShapeKind::Sphere;
    int count = 2000;         // N
    double noise = 0.0;       // sigma, applied along the normal
    uint64_t seed = 0;
    double size = 1.0;        // plane / two-sheets side, sphere radius
    double major = 1.0;       // torus R
    double minor = 0.3;       // torus r
    double hole_radius = 0.25;
    double gap = 0.05;        // two-sheets separation
    Vec3d box_extents{1.0, 1.0, 1.0};
};

namespace detail {

inline double gaussian(Rng& rng) {
    // Box-Muller on the reproducible uniform stream
    double u1 = std::max(rng.uniform(), 1e-300);
    double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace detail

// N points sampled uniformly by surface area with exact analytic unit
// normals; Gaussian noise (if any) displaces points along the normal after
// the normal has been assigned. The exact analytic area goes into `area`.
inline GroundTruthCloud gen_shape(const ShapeSpec& spec) {
    if (spec.count < 4) throw ShapeError("gen_shape: need at least 4 points");
    if (spec.noise < 0.0) throw ShapeError("gen_shape: noise must be >= 0");
    Rng rng(spec.seed);
    GroundTruthCloud cloud;
    cloud.points.reserve(static_cast<size_t>(spec.count));
    cloud.normals.reserve(static_cast<size_t>(spec.count));

    auto emit = [&](const Vec3d& p, const Vec3d& n) {
        Vec3d q = p;
        if (spec.noise > 0.0) q = q + n * (spec.noise * detail::gaussian(rng));
        cloud.points.push_back(q);
        cloud.normals.push_back(n);
    };

    switch (spec.kind) {
        case ShapeKind::Plane: {
            double a = spec.size;
            if (!(a > 0.0)) throw ShapeError("gen_shape: plane size must be positive");
            cloud.area = a * a;
            for (int i = 0; i < spec.count; ++i)
                emit({rng.uniform(-a / 2, a / 2), rng.uniform(-a / 2, a / 2), 0.0},
                     {0, 0, 1});
            break;
        }
        case ShapeKind::Sphere: {
            double r = spec.size;
            if (!(r > 0.0)) throw ShapeError("gen_shape: sphere radius must be positive");
            cloud.area = 4.0 * M_PI * r * r;
            for (int i = 0; i < spec.count; ++i) {
                double z = rng.uniform(-1.0, 1.0);
                double phi = rng.uniform(0.0, 2.0 * M_PI);
                double s = std::sqrt(std::max(0.0, 1.0 - z * z));
                Vec3d n{s * std::cos(phi), s * std::sin(phi), z};
                emit(n * r, n);
            }
            break;
        }
        case ShapeKind::Torus: {
            double R = spec.major, r = spec.minor;
            if (!(R > 0.0 && r > 0.0 && r < R))
                throw ShapeError("gen_shape: torus needs 0 < r < R");
            cloud.area = 4.0 * M_PI * M_PI * R * r;
            for (int i = 0; i < spec.count; ++i) {
                double phi = rng.uniform(0.0, 2.0 * M_PI);
                // area element ~ (R + r cos(theta)); rejection keeps it uniform
                double theta = rng.uniform(0.0, 2.0 * M_PI);
                while (rng.uniform() * (R + r) > R + r * std::cos(theta))
                    theta = rng.uniform(0.0, 2.0 * M_PI);
                double ct = std::cos(theta), st = std::sin(theta);
                Vec3d n{ct * std::cos(phi), ct * std::sin(phi), st};
                Vec3d p{(R + r * ct) * std::cos(phi), (R + r * ct) * std::sin(phi), r * st};
                emit(p, n);
            }
            break;
        }
        case ShapeKind::Box: {
            Vec3d e = spec.box_extents;
            if (!(e.x > 0.0 && e.y > 0.0 && e.z > 0.0))
                throw ShapeError("gen_shape: box extents must be positive");
            double axy = e.x * e.y, ayz = e.y * e.z, azx = e.z * e.x;
            cloud.area = 2.0 * (axy + ayz + azx);
            for (int i = 0; i < spec.count; ++i) {
                double pick = rng.uniform() * cloud.area;
                double s1 = rng.uniform(-0.5, 0.5), s2 = rng.uniform(-0.5, 0.5);
                double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
                if (pick < 2.0 * axy)
                    emit({s1 * e.x, s2 * e.y, side * e.z / 2}, {0, 0, side});
                else if (pick < 2.0 * (axy + ayz))
                    emit({side * e.x / 2, s1 * e.y, s2 * e.z}, {side, 0, 0});
                else
                    emit({s1 * e.x, side * e.y / 2, s2 * e.z}, {0, side, 0});
            }
            break;
        }
        case ShapeKind::PlaneWithHole: {
            double a = spec.size, rh = spec.hole_radius;
            if (!(a > 0.0 && rh > 0.0 && rh < a / 2))
                throw ShapeError("gen_shape: hole radius must be in (0, size/2)");
            cloud.area = a * a - M_PI * rh * rh;
            for (int i = 0; i < spec.count; ++i) {
                Vec3d p;
                do {
                    p = {rng.uniform(-a / 2, a / 2), rng.uniform(-a / 2, a / 2), 0.0};
                } while (p.x * p.x + p.y * p.y < rh * rh);
                emit(p, {0, 0, 1});
            }
            break;
        }
        case ShapeKind::TwoSheets: {
            double a = spec.size, g = spec.gap;
            if (!(a > 0.0 && g > 0.0))
                throw ShapeError("gen_shape: two-sheets needs positive size and gap");
            cloud.area = 2.0 * a * a;
            for (int i = 0; i < spec.count; ++i) {
                double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
                // opposite sheets carry opposite normals (thin-part scenario)
                emit({rng.uniform(-a / 2, a / 2), rng.uniform(-a / 2, a / 2),
                      side * g / 2},
                     {0, 0, side});
            }
            break;
        }
    }
    return cloud;
}

// --- normalization ----------------------------------------------------------

struct NormalizeTransform {
    Vec3d translate{0, 0, 0};  // applied before scaling
    double scale = 1.0;
};

// Centroid to the origin, uniform scale so the maximum half-extent is 1.
// Normals are unchanged; the area scales by s^2.
inline std::pair<GroundTruthCloud, NormalizeTransform> normalize(const GroundTruthCloud& in) {
    if (in.points.empty()) throw ShapeError("normalize: empty cloud");
    Vec3d c{0, 0, 0};
    for (const Vec3d& p : in.points) c = c + p;
    c = c * (1.0 / static_cast<double>(in.points.size()));
    double ext = 0.0;
    for (const Vec3d& p : in.points) {
        ext = std::max(ext, std::abs(p.x - c.x));
        ext = std::max(ext, std::abs(p.y - c.y));
        ext = std::max(ext, std::abs(p.z - c.z));
    }
    if (!(ext > 0.0)) throw ShapeError("normalize: zero extent");
    NormalizeTransform t{c * -1.0, 1.0 / ext};
    GroundTruthCloud out = in;
    for (Vec3d& p : out.points) p = (p + t.translate) * t.scale;
    out.area = in.area * t.scale * t.scale;
    return {out, t};
}

inline GroundTruthCloud denormalize(const GroundTruthCloud& in, const NormalizeTransform& t) {
    GroundTruthCloud out = in;
    for (Vec3d& p : out.points) p = p * (1.0 / t.scale) - t.translate;
    out.area = in.area / (t.scale * t.scale);
    return out;
}

}  // namespace patchfit
