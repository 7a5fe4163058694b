#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchfit/spatial.hpp"
#include "patchfit/vec.hpp"

namespace patchfit {

inline constexpr const char* kToolVersion = "patchfit 0.1.0";

struct PlyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little,
              "binary PLY I/O assumes a little-endian host");

struct PlyReadInfo {
    bool had_normals = true;
    bool had_area = true;
    std::string warning;
};

namespace detail {

inline void write_doubles(std::ostream& os, const double* v, size_t n, bool binary) {
    if (binary) {
        os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 8));
    } else {
        char buf[32];
        for (size_t i = 0; i < n; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", v[i]);
            os << (i ? " " : "") << buf;
        }
    }
}

}  // namespace detail

inline void write_pointcloud(const std::string& path, const GroundTruthCloud& cloud,
                             bool binary = true) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw PlyError("write_pointcloud: cannot open " + path);
    os << "ply\n"
       << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
       << "comment generated by " << kToolVersion << "\n";
    char area_buf[48];
    std::snprintf(area_buf, sizeof area_buf, "%.17g", cloud.area);
    os << "comment area " << area_buf << "\n"
       << "element vertex " << cloud.points.size() << "\n"
       << "property float64 x\nproperty float64 y\nproperty float64 z\n"
       << "property float64 nx\nproperty float64 ny\nproperty float64 nz\n"
       << "end_header\n";
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        double row[6] = {cloud.points[i].x, cloud.points[i].y, cloud.points[i].z,
                         cloud.normals[i].x, cloud.normals[i].y, cloud.normals[i].z};
        detail::write_doubles(os, row, 6, binary);
        if (!binary) os << "\n";
    }
    if (!os) throw PlyError("write_pointcloud: write failed for " + path);
}

inline void write_pointcloud(const std::string& path, const PredictedCloud& cloud,
                             bool binary = true) {
    for (const auto& p : cloud.points)
        if (p.patch_id > 255)
            throw PlyError("write_pointcloud: patch_id exceeds uint8 range (K > 255)");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw PlyError("write_pointcloud: cannot open " + path);
    os << "ply\n"
       << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
       << "comment generated by " << kToolVersion << "\n"
       << "element vertex " << cloud.points.size() << "\n"
       << "property float64 x\nproperty float64 y\nproperty float64 z\n"
       << "property float64 nx\nproperty float64 ny\nproperty float64 nz\n"
       << "property uint8 patch_id\n"
       << "end_header\n";
    for (const auto& p : cloud.points) {
        double row[6] = {p.position.x, p.position.y, p.position.z,
                         p.normal.x, p.normal.y, p.normal.z};
        uint8_t pid = static_cast<uint8_t>(p.patch_id);
        detail::write_doubles(os, row, 6, binary);
        if (binary)
            os.write(reinterpret_cast<const char*>(&pid), 1);
        else
            os << " " << static_cast<int>(pid) << "\n";
    }
    if (!os) throw PlyError("write_pointcloud: write failed for " + path);
}

inline GroundTruthCloud read_pointcloud(const std::string& path,
                                        PlyReadInfo* info = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw PlyError("read_pointcloud: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "ply")
        throw PlyError("read_pointcloud: missing 'ply' magic in " + path);

    bool binary = false;
    size_t n_vertex = 0;
    bool in_vertex = false, saw_format = false;
    double area = -1.0;
    struct Prop {
        std::string name;
        int bytes;  // 8 double, 4 float, 1 uchar
    };
    std::vector<Prop> props;

    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment") {
            std::string what;
            ls >> what;
            if (what == "area") ls >> area;
            continue;
        }
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else throw PlyError("read_pointcloud: unsupported format '" + fmt + "'");
            saw_format = true;
        } else if (tok == "element") {
            std::string name;
            size_t count = 0;
            ls >> name >> count;
            if (name == "vertex") {
                n_vertex = count;
                in_vertex = true;
            } else {
                if (count > 0)
                    throw PlyError("read_pointcloud: unsupported element '" + name + "'");
                in_vertex = false;
            }
        } else if (tok == "property") {
            if (!in_vertex) continue;
            std::string type, name;
            ls >> type >> name;
            int bytes;
            if (type == "float64" || type == "double") bytes = 8;
            else if (type == "float32" || type == "float") bytes = 4;
            else if (type == "uint8" || type == "uchar") bytes = 1;
            else throw PlyError("read_pointcloud: unsupported property type '" + type + "'");
            props.push_back({name, bytes});
        } else if (tok == "end_header") {
            break;
        } else if (!tok.empty()) {
            throw PlyError("read_pointcloud: malformed header line '" + line + "'");
        }
    }
    if (!saw_format || n_vertex == 0)
        throw PlyError("read_pointcloud: malformed or empty header in " + path);

    auto col = [&](const std::string& name) {
        for (size_t i = 0; i < props.size(); ++i)
            if (props[i].name == name) return static_cast<int>(i);
        return -1;
    };
    int cx = col("x"), cy = col("y"), cz = col("z");
    if (cx < 0 || cy < 0 || cz < 0)
        throw PlyError("read_pointcloud: vertex element lacks x/y/z");
    int cnx = col("nx"), cny = col("ny"), cnz = col("nz");
    bool has_normals = cnx >= 0 && cny >= 0 && cnz >= 0;

    GroundTruthCloud cloud;
    cloud.points.reserve(n_vertex);
    if (has_normals) cloud.normals.reserve(n_vertex);
    std::vector<double> row(props.size());
    for (size_t v = 0; v < n_vertex; ++v) {
        for (size_t c = 0; c < props.size(); ++c) {
            if (binary) {
                char buf[8];
                is.read(buf, props[c].bytes);
                if (!is) throw PlyError("read_pointcloud: truncated payload in " + path);
                if (props[c].bytes == 8) {
                    double d;
                    std::memcpy(&d, buf, 8);
                    row[c] = d;
                } else if (props[c].bytes == 4) {
                    float f;
                    std::memcpy(&f, buf, 4);
                    row[c] = f;
                } else {
                    row[c] = static_cast<unsigned char>(buf[0]);
                }
            } else {
                if (!(is >> row[c]))
                    throw PlyError("read_pointcloud: truncated payload in " + path);
            }
        }
        cloud.points.push_back({row[static_cast<size_t>(cx)], row[static_cast<size_t>(cy)],
                                row[static_cast<size_t>(cz)]});
        if (has_normals)
            cloud.normals.push_back({row[static_cast<size_t>(cnx)],
                                     row[static_cast<size_t>(cny)],
                                     row[static_cast<size_t>(cnz)]});
    }

    PlyReadInfo inf;
    if (!has_normals) {
        // estimate unoriented normals from 16-point neighborhoods
        inf.had_normals = false;
        inf.warning = "no normals in " + path + "; estimated from 16-point neighborhoods";
        KdTree tree(cloud.points);
        cloud.normals.resize(cloud.points.size());
        int n_nb = std::min<int>(16, static_cast<int>(cloud.points.size()) - 1);
        for (size_t i = 0; i < cloud.points.size(); ++i) {
            auto nb = tree.knn(cloud.points[i], n_nb, static_cast<int>(i));
            std::vector<Vec3d> pts;
            pts.reserve(nb.size() + 1);
            pts.push_back(cloud.points[i]);
            for (int j : nb) pts.push_back(cloud.points[static_cast<size_t>(j)]);
            cloud.normals[i] = covariance_normal(pts).normal;
        }
    }
    if (area > 0.0) {
        cloud.area = area;
    } else {
        // density heuristic: for uniform surface sampling E[nn distance]
        // is about 1 / (2 sqrt(N / A)), so A ~ 4 N dbar^2
        inf.had_area = false;
        KdTree tree(cloud.points);
        double dbar = 0.0;
        for (size_t i = 0; i < cloud.points.size(); ++i) {
            int j = tree.nearest(cloud.points[i], static_cast<int>(i));
            dbar += std::sqrt(dist2(cloud.points[i], cloud.points[static_cast<size_t>(j)]));
        }
        dbar /= static_cast<double>(cloud.points.size());
        cloud.area = 4.0 * static_cast<double>(cloud.points.size()) * dbar * dbar;
    }
    if (info) *info = inf;
    return cloud;
}

}  // namespace patchfit
