#include "mtscene/recon3d.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace mtscene {

void Intrinsics::validate(int64_t width, int64_t height) const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("Intrinsics: focal lengths must be positive");
    if (cx < 0 || cx > static_cast<double>(width) || cy < 0 || cy > static_cast<double>(height))
        throw std::invalid_argument("Intrinsics: principal point outside image bounds");
}

void PointCloud::validate() const {
    if (colors.size() != points.size()) throw std::invalid_argument("PointCloud: colors not parallel to points");
    if (!labels.empty() && labels.size() != points.size())
        throw std::invalid_argument("PointCloud: labels not parallel to points");
    for (const auto& p : points)
        if (!(p[2] > 0)) throw std::invalid_argument("PointCloud: non-positive z");
}

PointCloud backproject(const Tensor& depth, const Tensor& rgb, const Tensor* mask, const Intrinsics& k,
                       double scale_mm, double depth_floor_mm) {
    if (depth.ndim() != 2) throw std::invalid_argument("backproject: depth must be [H,W]");
    int64_t h = depth.shape[0], w = depth.shape[1];
    if (rgb.ndim() != 3 || rgb.shape[0] != 3 || rgb.shape[1] != h || rgb.shape[2] != w)
        throw std::invalid_argument("backproject: rgb extents " + rgb.shape_str() + " do not match depth " +
                                    depth.shape_str());
    if (mask && (mask->ndim() != 2 || mask->shape[0] != h || mask->shape[1] != w))
        throw std::invalid_argument("backproject: mask extents do not match depth");
    if (!(scale_mm > 0)) throw std::invalid_argument("backproject: scale_mm must be positive");
    k.validate(w, h);

    PointCloud cloud;
    cloud.points.reserve(static_cast<size_t>(h * w));
    for (int64_t v = 0; v < h; ++v)
        for (int64_t u = 0; u < w; ++u) {
            double z = depth.at(v, u) * scale_mm;
            if (!(z >= depth_floor_mm)) continue;
            double x = (static_cast<double>(u) - k.cx) * z / k.fx;
            double y = (static_cast<double>(v) - k.cy) * z / k.fy;
            cloud.points.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)});
            auto q = [&](int64_t c) {
                double val = std::clamp(rgb.at(c, v, u), 0.0, 1.0);
                return static_cast<uint8_t>(std::lround(val * 255.0));
            };
            cloud.colors.push_back({q(0), q(1), q(2)});
            if (mask) cloud.labels.push_back(static_cast<uint8_t>(mask->at(v, u)));
        }
    return cloud;
}

DepthRaster reproject(const PointCloud& cloud, const Intrinsics& k, int64_t height, int64_t width,
                      double scale_mm) {
    if (cloud.points.empty()) throw std::invalid_argument("reproject: empty cloud");
    if (!(scale_mm > 0)) throw std::invalid_argument("reproject: scale_mm must be positive");
    k.validate(width, height);
    DepthRaster out;
    out.depth = Tensor::zeros({height, width});
    out.valid.assign(static_cast<size_t>(height * width), 0);
    Tensor zbuf = Tensor::full({height, width}, std::numeric_limits<double>::infinity());
    for (const auto& p : cloud.points) {
        double z = p[2];
        if (!(z > 0)) continue;
        int64_t u = static_cast<int64_t>(std::lround(k.fx * p[0] / z + k.cx));
        int64_t v = static_cast<int64_t>(std::lround(k.fy * p[1] / z + k.cy));
        if (u < 0 || u >= width || v < 0 || v >= height) continue;
        if (z < zbuf.at(v, u)) {
            zbuf.at(v, u) = z;
            out.depth.at(v, u) = z / scale_mm;
            out.valid[static_cast<size_t>(v * width + u)] = 1;
        }
    }
    return out;
}

// ---------------- PLY ----------------

void write_ply(const PointCloud& cloud, const std::string& path, PlyFormat format) {
    cloud.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ply: cannot open '" + path + "'");
    f << "ply\n";
    f << "format " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
    f << "element vertex " << cloud.size() << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    if (cloud.has_labels()) f << "property uchar label\n";
    f << "end_header\n";
    if (format == PlyFormat::Ascii) {
        std::ostringstream os;
        os.precision(9);
        for (size_t i = 0; i < cloud.size(); ++i) {
            os << cloud.points[i][0] << " " << cloud.points[i][1] << " " << cloud.points[i][2] << " "
               << static_cast<int>(cloud.colors[i][0]) << " " << static_cast<int>(cloud.colors[i][1]) << " "
               << static_cast<int>(cloud.colors[i][2]);
            if (cloud.has_labels()) os << " " << static_cast<int>(cloud.labels[i]);
            os << "\n";
        }
        f << os.str();
    } else {
        for (size_t i = 0; i < cloud.size(); ++i) {
            f.write(reinterpret_cast<const char*>(cloud.points[i].data()), 12);
            f.write(reinterpret_cast<const char*>(cloud.colors[i].data()), 3);
            if (cloud.has_labels()) f.write(reinterpret_cast<const char*>(&cloud.labels[i]), 1);
        }
    }
    if (!f) throw std::runtime_error("write_ply: write failed for '" + path + "'");
}

PointCloud read_ply(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ply: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "ply") throw std::runtime_error("read_ply: missing 'ply' magic");
    bool ascii = false, seen_format = false, has_label = false;
    size_t count = 0;
    std::vector<std::string> props;
    while (std::getline(f, line)) {
        if (line == "end_header") break;
        std::istringstream is(line);
        std::string tok;
        is >> tok;
        if (tok == "format") {
            std::string fmt, ver;
            is >> fmt >> ver;
            if (ver != "1.0") throw std::runtime_error("read_ply: unsupported version " + ver);
            if (fmt == "ascii") ascii = true;
            else if (fmt == "binary_little_endian") ascii = false;
            else throw std::runtime_error("read_ply: unsupported format " + fmt);
            seen_format = true;
        } else if (tok == "element") {
            std::string kind;
            is >> kind >> count;
            if (kind != "vertex") throw std::runtime_error("read_ply: unsupported element " + kind);
        } else if (tok == "property") {
            std::string type, name;
            is >> type >> name;
            props.push_back(name);
        } else if (tok == "comment") {
            continue;
        } else {
            throw std::runtime_error("read_ply: unexpected header line '" + line + "'");
        }
    }
    std::vector<std::string> expect = {"x", "y", "z", "red", "green", "blue"};
    if (props.size() == 7 && props[6] == "label") {
        has_label = true;
        props.pop_back();
    }
    if (!seen_format || props != expect)
        throw std::runtime_error("read_ply: property layout not supported");

    PointCloud cloud;
    cloud.points.resize(count);
    cloud.colors.resize(count);
    if (has_label) cloud.labels.resize(count);
    if (ascii) {
        for (size_t i = 0; i < count; ++i) {
            int r, g, b, l = 0;
            if (!(f >> cloud.points[i][0] >> cloud.points[i][1] >> cloud.points[i][2] >> r >> g >> b))
                throw std::runtime_error("read_ply: truncated ascii payload");
            if (has_label && !(f >> l)) throw std::runtime_error("read_ply: truncated ascii payload");
            cloud.colors[i] = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
            if (has_label) cloud.labels[i] = static_cast<uint8_t>(l);
        }
    } else {
        for (size_t i = 0; i < count; ++i) {
            f.read(reinterpret_cast<char*>(cloud.points[i].data()), 12);
            f.read(reinterpret_cast<char*>(cloud.colors[i].data()), 3);
            if (has_label) f.read(reinterpret_cast<char*>(&cloud.labels[i]), 1);
            if (!f) throw std::runtime_error("read_ply: truncated binary payload");
        }
    }
    return cloud;
}

}  // namespace mtscene
