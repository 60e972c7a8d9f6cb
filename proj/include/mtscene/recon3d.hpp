#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtscene/tensor.hpp"

namespace mtscene {

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;  // pixels
    void validate(int64_t width, int64_t height) const;
};

struct PointCloud {
    std::vector<std::array<float, 3>> points;       // mm
    std::vector<std::array<uint8_t, 3>> colors;
    std::vector<uint8_t> labels;                    // optional, empty or parallel
    bool has_labels() const { return !labels.empty(); }
    size_t size() const { return points.size(); }
    void validate() const;
};

// Per-pixel pinhole back-projection. depth: normalized [H,W]; rgb: [3,H,W]
// with values in [0,1]; mask: optional class map [H,W]. Pixels with metric
// depth below depth_floor_mm are skipped.
PointCloud backproject(const Tensor& depth, const Tensor& rgb, const Tensor* mask, const Intrinsics& k,
                       double scale_mm, double depth_floor_mm = 1e-3);

struct DepthRaster {
    Tensor depth;               // normalized, [H,W]
    std::vector<uint8_t> valid; // H*W flags
};

// Nearest-pixel rasterization keeping minimum z per pixel; depths are
// re-normalized by scale_mm.
DepthRaster reproject(const PointCloud& cloud, const Intrinsics& k, int64_t height, int64_t width,
                      double scale_mm);

enum class PlyFormat { Ascii, BinaryLittleEndian };

void write_ply(const PointCloud& cloud, const std::string& path, PlyFormat format);
PointCloud read_ply(const std::string& path);

}  // namespace mtscene
