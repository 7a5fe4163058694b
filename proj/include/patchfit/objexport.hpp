#pragma once

#include <array>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchfit/decoder.hpp"

namespace patchfit {

struct ExportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// fixed palette cycled over patches so adjacent ids get distinct colors
inline constexpr std::array<std::array<double, 3>, 25> kPatchPalette = {{
    {0.894, 0.102, 0.110}, {0.216, 0.494, 0.722}, {0.302, 0.686, 0.290},
    {0.596, 0.306, 0.639}, {1.000, 0.498, 0.000}, {1.000, 1.000, 0.200},
    {0.651, 0.337, 0.157}, {0.969, 0.506, 0.749}, {0.600, 0.600, 0.600},
    {0.122, 0.471, 0.706}, {0.682, 0.780, 0.910}, {0.200, 0.627, 0.173},
    {0.698, 0.875, 0.541}, {0.890, 0.102, 0.110}, {0.984, 0.604, 0.600},
    {1.000, 0.498, 0.000}, {0.992, 0.749, 0.435}, {0.416, 0.239, 0.604},
    {0.792, 0.698, 0.839}, {0.694, 0.349, 0.157}, {0.000, 0.620, 0.451},
    {0.902, 0.624, 0.000}, {0.337, 0.706, 0.914}, {0.835, 0.369, 0.000},
    {0.800, 0.475, 0.655},
}};

struct ObjExportStats {
    std::vector<int> vertices_per_patch;
    std::vector<int> quads_per_patch;
};

// Writes one quad mesh per patch (a regular res x res UV grid) plus a
// companion .mtl next to obj_path. Returns per-patch counts.
inline ObjExportStats export_obj(const std::string& obj_path, const Atlas& atlas,
                                 int grid_resolution) {
    if (grid_resolution < 2) throw ExportError("export_obj: grid_resolution must be >= 2");
    std::string mtl_path = obj_path;
    if (auto dot = mtl_path.rfind('.'); dot != std::string::npos) mtl_path.resize(dot);
    mtl_path += ".mtl";

    std::ofstream mtl(mtl_path);
    if (!mtl) throw ExportError("export_obj: cannot open " + mtl_path);
    for (size_t i = 0; i < kPatchPalette.size(); ++i) {
        mtl << "newmtl patch" << i << "\n"
            << "Kd " << kPatchPalette[i][0] << " " << kPatchPalette[i][1] << " "
            << kPatchPalette[i][2] << "\n";
    }

    std::ofstream os(obj_path);
    if (!os) throw ExportError("export_obj: cannot open " + obj_path);
    std::string mtl_name = mtl_path;
    if (auto slash = mtl_name.rfind('/'); slash != std::string::npos)
        mtl_name = mtl_name.substr(slash + 1);
    os << "mtllib " << mtl_name << "\n";

    ObjExportStats stats;
    const int res = grid_resolution;
    int base = 1;  // OBJ vertex indices are 1-based and global
    for (int k = 0; k < atlas.arch.patch_count; ++k) {
        os << "o patch_" << k << "\n"
           << "usemtl patch" << (k % static_cast<int>(kPatchPalette.size())) << "\n";
        for (int i = 0; i < res; ++i) {
            double u = static_cast<double>(i) / (res - 1);
            for (int j = 0; j < res; ++j) {
                double v = static_cast<double>(j) / (res - 1);
                Vec3d p = decode<double>(atlas.arch, atlas.params, k, u, v);
                char buf[96];
                std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", p.x, p.y, p.z);
                os << buf;
            }
        }
        for (int i = 0; i + 1 < res; ++i)
            for (int j = 0; j + 1 < res; ++j) {
                int a = base + i * res + j;
                int b = base + (i + 1) * res + j;
                int c = base + (i + 1) * res + j + 1;
                int d = base + i * res + j + 1;
                os << "f " << a << " " << b << " " << c << " " << d << "\n";
            }
        stats.vertices_per_patch.push_back(res * res);
        stats.quads_per_patch.push_back((res - 1) * (res - 1));
        base += res * res;
    }
    if (!os) throw ExportError("export_obj: write failed for " + obj_path);
    return stats;
}

}  // namespace patchfit
