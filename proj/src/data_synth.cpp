#include "mtscene/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mtscene/png_io.hpp"
#include "mtscene/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtscene {

namespace {

// instrument class palette (classes 1..7), roughly metallic hues distinct
// from the reddish tissue background
constexpr double kClassColors[7][3] = {
    {0.78, 0.80, 0.86}, {0.55, 0.75, 0.88}, {0.58, 0.85, 0.58}, {0.86, 0.84, 0.52},
    {0.80, 0.58, 0.86}, {0.87, 0.64, 0.42}, {0.70, 0.72, 0.48},
};

double lattice(uint64_t seed, int64_t ix, int64_t iy, int64_t octave) {
    uint64_t k = mix_seed(seed, (static_cast<uint64_t>(octave) << 42) ^
                                    (static_cast<uint64_t>(ix & 0x1fffff) << 21) ^
                                    static_cast<uint64_t>(iy & 0x1fffff));
    return static_cast<double>(k >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// multi-octave value noise on [0,1)^2, output in [0,1]
double value_noise(uint64_t seed, double x, double y, int64_t octaves) {
    double acc = 0.0, amp = 1.0, norm = 0.0;
    double freq = 4.0;
    for (int64_t o = 0; o < octaves; ++o) {
        double fx = x * freq, fy = y * freq;
        int64_t ix = static_cast<int64_t>(std::floor(fx)), iy = static_cast<int64_t>(std::floor(fy));
        double tx = smoothstep(fx - static_cast<double>(ix));
        double ty = smoothstep(fy - static_cast<double>(iy));
        double v00 = lattice(seed, ix, iy, o), v10 = lattice(seed, ix + 1, iy, o);
        double v01 = lattice(seed, ix, iy + 1, o), v11 = lattice(seed, ix + 1, iy + 1, o);
        double v = (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
        acc += amp * v;
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    return acc / norm;
}

struct Capsule {
    double ax, ay, bx, by, radius;
    double d0, d1;  // depth at A and at B
    int cls;
    // returns axial parameter in [0,1] and distance to the segment
    bool covers(double px, double py, double& t_out) const {
        double vx = bx - ax, vy = by - ay;
        double len2 = vx * vx + vy * vy;
        double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
        if (dx * dx + dy * dy > radius * radius) return false;
        t_out = t;
        return true;
    }
};

std::string sample_stem(int64_t index) {
    std::ostringstream os;
    os.width(6);
    os.fill('0');
    os << index;
    return os.str();
}

}  // namespace

void SceneConfig::validate() const {
    if (image_size < 16) throw std::invalid_argument("SceneConfig: image_size must be at least 16");
    if (num_classes < 2 || num_classes > 8)
        throw std::invalid_argument("SceneConfig: num_classes must be in [2,8] (background + up to 7)");
    if (min_instruments < 1 || max_instruments < min_instruments)
        throw std::invalid_argument("SceneConfig: instrument count range invalid");
    if (!(tube_width_min > 2 && tube_width_max >= tube_width_min))
        throw std::invalid_argument("SceneConfig: tube width range invalid");
    if (!(tube_length_min > 0 && tube_length_max >= tube_length_min))
        throw std::invalid_argument("SceneConfig: tube length range invalid");
    if (background_octaves < 1) throw std::invalid_argument("SceneConfig: background_octaves must be positive");
    if (!(instrument_depth_min > 0 && instrument_depth_max > instrument_depth_min &&
          background_depth_min > instrument_depth_max && background_depth_max > background_depth_min &&
          background_depth_max < 1.0))
        throw std::invalid_argument(
            "SceneConfig: depth ranges must satisfy 0 < instrument range < background range < 1");
    if (noise_level < 0 || noise_level > 0.2) throw std::invalid_argument("SceneConfig: noise_level out of range");
}

void Sample::validate() const {
    if (image.ndim() != 3 || image.shape[0] != 3) throw std::invalid_argument("Sample: image must be [3,H,W]");
    int64_t h = image.shape[1], w = image.shape[2];
    if (mask.ndim() != 2 || mask.shape[0] != h || mask.shape[1] != w)
        throw std::invalid_argument("Sample: mask extents mismatch");
    if (depth.ndim() != 2 || depth.shape[0] != h || depth.shape[1] != w)
        throw std::invalid_argument("Sample: depth extents mismatch");
    for (double d : depth.data)
        if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("Sample: depth out of [0,1]");
    for (const auto& b : boxes)
        if (!(b.x0 < b.x1 && b.y0 < b.y1 && b.x0 >= 0 && b.y0 >= 0 && b.x1 <= static_cast<double>(w) &&
              b.y1 <= static_cast<double>(h)))
            throw std::invalid_argument("Sample: box outside image bounds or degenerate");
    if (!(depth_scale_mm > 0)) throw std::invalid_argument("Sample: depth_scale_mm must be positive");
}

Sample generate_scene(uint64_t seed, const SceneConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, seed));
    uint64_t depth_seed = rng.next();
    uint64_t texture_seed = rng.next();
    int64_t s = cfg.image_size;

    Sample smp;
    smp.image = Tensor::zeros({3, s, s});
    smp.mask = Tensor::zeros({s, s});
    smp.depth = Tensor::zeros({s, s});
    smp.intrinsics = {0.8 * static_cast<double>(s), 0.8 * static_cast<double>(s),
                      static_cast<double>(s) / 2.0, static_cast<double>(s) / 2.0};

    // background: smooth depth field, tissue texture, brightness tied to depth
    double bd_lo = cfg.background_depth_min, bd_hi = cfg.background_depth_max;
    for (int64_t y = 0; y < s; ++y)
        for (int64_t x = 0; x < s; ++x) {
            double u = static_cast<double>(x) / static_cast<double>(s);
            double v = static_cast<double>(y) / static_cast<double>(s);
            double d = bd_lo + (bd_hi - bd_lo) * value_noise(depth_seed, u, v, 2);
            smp.depth.at(y, x) = d;
            double tex = value_noise(texture_seed, u, v, cfg.background_octaves);
            double bright = 1.35 - d;  // nearer tissue is better lit
            double mod = 0.90 + 0.20 * tex;
            smp.image.at(0, y, x) = std::clamp(0.66 * bright * mod, 0.0, 1.0);
            smp.image.at(1, y, x) = std::clamp(0.30 * bright * mod, 0.0, 1.0);
            // blue rises with depth, so the blue/red ratio pins depth even where
            // the multiplicative texture is ambiguous against the shading
            smp.image.at(2, y, x) = std::clamp((0.10 + 0.30 * d) * mod, 0.0, 1.0);
        }

    // instruments: retry whole layouts until every tube stays visible
    const int64_t min_visible = 12;
    const int max_attempts = 64;
    std::vector<Capsule> tubes;
    std::vector<std::vector<int64_t>> visible;  // per tube: flat pixel ids
    for (int attempt = 0;; ++attempt) {
        if (attempt >= max_attempts)
            throw std::runtime_error("generate_scene: unsatisfiable geometry after " +
                                     std::to_string(max_attempts) + " retries");
        tubes.clear();
        int64_t n = rng.uniform_int(cfg.min_instruments, cfg.max_instruments);
        for (int64_t i = 0; i < n; ++i) {
            Capsule c;
            double cx = rng.uniform(0.18, 0.82) * static_cast<double>(s);
            double cy = rng.uniform(0.18, 0.82) * static_cast<double>(s);
            double theta = rng.uniform(0.0, 3.14159265358979323846);
            double len = rng.uniform(cfg.tube_length_min, cfg.tube_length_max);
            c.radius = 0.5 * rng.uniform(cfg.tube_width_min, cfg.tube_width_max);
            c.ax = cx - 0.5 * len * std::cos(theta);
            c.ay = cy - 0.5 * len * std::sin(theta);
            c.bx = cx + 0.5 * len * std::cos(theta);
            c.by = cy + 0.5 * len * std::sin(theta);
            c.d0 = rng.uniform(cfg.instrument_depth_min, cfg.instrument_depth_max);
            c.d1 = rng.uniform(cfg.instrument_depth_min, cfg.instrument_depth_max);
            c.cls = 1 + static_cast<int>(rng.uniform_int(0, cfg.num_classes - 2));
            tubes.push_back(c);
        }
        // nearest tube wins each pixel
        visible.assign(tubes.size(), {});
        bool ok = true;
        std::vector<int> owner(static_cast<size_t>(s * s), -1);
        std::vector<double> tube_depth(static_cast<size_t>(s * s), 2.0);
        for (size_t ti = 0; ti < tubes.size(); ++ti) {
            const Capsule& c = tubes[ti];
            int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(c.ax, c.bx) - c.radius)));
            int64_t x1 = std::min<int64_t>(s - 1, static_cast<int64_t>(std::ceil(std::max(c.ax, c.bx) + c.radius)));
            int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(c.ay, c.by) - c.radius)));
            int64_t y1 = std::min<int64_t>(s - 1, static_cast<int64_t>(std::ceil(std::max(c.ay, c.by) + c.radius)));
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x) {
                    double t;
                    if (!c.covers(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, t)) continue;
                    double d = c.d0 + (c.d1 - c.d0) * t;
                    size_t pix = static_cast<size_t>(y * s + x);
                    if (d < tube_depth[pix]) {
                        tube_depth[pix] = d;
                        owner[pix] = static_cast<int>(ti);
                    }
                }
        }
        for (size_t pix = 0; pix < owner.size(); ++pix)
            if (owner[pix] >= 0) visible[static_cast<size_t>(owner[pix])].push_back(static_cast<int64_t>(pix));
        for (const auto& vis : visible)
            if (static_cast<int64_t>(vis.size()) < min_visible) ok = false;
        if (!ok) continue;
        // paint
        for (size_t ti = 0; ti < tubes.size(); ++ti) {
            const Capsule& c = tubes[ti];
            const double* col = kClassColors[c.cls - 1];
            for (int64_t pix : visible[ti]) {
                int64_t y = pix / s, x = pix % s;
                double d = tube_depth[static_cast<size_t>(pix)];
                smp.depth.at(y, x) = d;
                smp.mask.at(y, x) = static_cast<double>(c.cls);
                double bright = 1.25 - d;
                for (int64_t ch = 0; ch < 3; ++ch) smp.image.at(ch, y, x) = std::clamp(col[ch] * bright, 0.0, 1.0);
            }
        }
        break;
    }

    // tight boxes over each tube's visible pixels (half-open convention)
    for (size_t ti = 0; ti < tubes.size(); ++ti) {
        int64_t x0 = s, x1 = -1, y0 = s, y1 = -1;
        for (int64_t pix : visible[ti]) {
            int64_t y = pix / s, x = pix % s;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
        Box b;
        b.x0 = static_cast<double>(x0);
        b.y0 = static_cast<double>(y0);
        b.x1 = static_cast<double>(x1 + 1);
        b.y1 = static_cast<double>(y1 + 1);
        b.cls = tubes[ti].cls;
        smp.boxes.push_back(b);
    }

    // pixel noise on the image only; ground truth stays exact
    if (cfg.noise_level > 0)
        for (double& v : smp.image.data) v = std::clamp(v + rng.uniform(-cfg.noise_level, cfg.noise_level), 0.0, 1.0);

    smp.validate();
    return smp;
}

uint16_t quantize_depth16(double v) {
    double q = std::floor(std::clamp(v, 0.0, 1.0) * 65535.0 + 0.5);  // round half up
    return static_cast<uint16_t>(q);
}

void write_sample(const Sample& sample, const std::string& directory, int64_t index) {
    sample.validate();
    fs::create_directories(directory);
    std::string stem = directory + "/" + sample_stem(index);
    int64_t h = sample.height(), w = sample.width();

    std::vector<uint8_t> rgb(static_cast<size_t>(3 * h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                rgb[static_cast<size_t>((y * w + x) * 3 + c)] =
                    static_cast<uint8_t>(std::lround(std::clamp(sample.image.at(c, y, x), 0.0, 1.0) * 255.0));
    write_png_rgb8(stem + "_image.png", rgb, h, w);

    std::vector<uint8_t> idx(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) idx[static_cast<size_t>(i)] = static_cast<uint8_t>(sample.mask[i]);
    write_png_index8(stem + "_mask.png", idx, h, w);

    std::vector<uint16_t> d16(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) d16[static_cast<size_t>(i)] = quantize_depth16(sample.depth[i]);
    write_png_gray16(stem + "_depth.png", d16, h, w);

    json j;
    j["boxes"] = json::array();
    for (const auto& b : sample.boxes)
        j["boxes"].push_back({{"cls", b.cls}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
    j["intrinsics"] = {{"fx", sample.intrinsics.fx},
                       {"fy", sample.intrinsics.fy},
                       {"cx", sample.intrinsics.cx},
                       {"cy", sample.intrinsics.cy}};
    j["depth_scale_mm"] = sample.depth_scale_mm;
    j["has_annotations"] = sample.has_annotations;
    std::ofstream f(stem + "_meta.json");
    if (!f) throw std::runtime_error("write_sample: cannot open '" + stem + "_meta.json'");
    f << j.dump(2) << "\n";
}

Sample read_sample(const std::string& directory, int64_t index) {
    std::string stem = directory + "/" + sample_stem(index);
    std::string meta_path = stem + "_meta.json";
    std::ifstream f(meta_path);
    if (!f) throw std::runtime_error("read_sample: missing sidecar '" + meta_path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("read_sample: corrupt sidecar '" + meta_path + "': " + e.what());
    }

    Sample s;
    int64_t h = 0, w = 0;
    auto rgb = read_png_rgb8(stem + "_image.png", h, w);
    s.image = Tensor::zeros({3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                s.image.at(c, y, x) = static_cast<double>(rgb[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0;

    int64_t mh = 0, mw = 0;
    auto idx = read_png_index8(stem + "_mask.png", mh, mw);
    if (mh != h || mw != w) throw std::runtime_error("read_sample: mask extents differ from image in '" + stem + "'");
    s.mask = Tensor::zeros({h, w});
    for (int64_t i = 0; i < h * w; ++i) s.mask[i] = static_cast<double>(idx[static_cast<size_t>(i)]);

    int64_t dh = 0, dw = 0;
    auto d16 = read_png_gray16(stem + "_depth.png", dh, dw);
    if (dh != h || dw != w) throw std::runtime_error("read_sample: depth extents differ from image in '" + stem + "'");
    s.depth = Tensor::zeros({h, w});
    for (int64_t i = 0; i < h * w; ++i) s.depth[i] = static_cast<double>(d16[static_cast<size_t>(i)]) / 65535.0;

    for (const auto& jb : j.at("boxes")) {
        Box b;
        b.cls = jb.at("cls").get<int>();
        b.x0 = jb.at("x0").get<double>();
        b.y0 = jb.at("y0").get<double>();
        b.x1 = jb.at("x1").get<double>();
        b.y1 = jb.at("y1").get<double>();
        s.boxes.push_back(b);
    }
    const auto& ji = j.at("intrinsics");
    s.intrinsics = {ji.at("fx").get<double>(), ji.at("fy").get<double>(), ji.at("cx").get<double>(),
                    ji.at("cy").get<double>()};
    s.depth_scale_mm = j.at("depth_scale_mm").get<double>();
    s.has_annotations = j.value("has_annotations", true);
    s.validate();
    return s;
}

void write_dataset(const std::string& directory, const SceneConfig& cfg, uint64_t base_seed, int64_t n_train,
                   int64_t n_val, int64_t n_test) {
    cfg.validate();
    if (n_train < 0 || n_val < 0 || n_test < 0) throw std::invalid_argument("write_dataset: negative split size");
    fs::create_directories(directory);
    int64_t total = n_train + n_val + n_test;
    json splits = {{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
    for (int64_t i = 0; i < total; ++i) {
        Sample s = generate_scene(mix_seed(base_seed, static_cast<uint64_t>(i)), cfg);
        write_sample(s, directory, i);
        const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        splits[split].push_back(i);
    }
    json m;
    m["image_size"] = cfg.image_size;
    m["num_classes"] = cfg.num_classes;
    m["base_seed"] = base_seed;
    m["scene_config"] = to_json(cfg);
    m["splits"] = splits;
    std::ofstream f(directory + "/manifest.json");
    if (!f) throw std::runtime_error("write_dataset: cannot open manifest");
    f << m.dump(2) << "\n";
}

Dataset load_split(const std::string& directory, const std::string& split) {
    std::ifstream f(directory + "/manifest.json");
    if (!f) throw std::runtime_error("load_split: missing '" + directory + "/manifest.json'");
    json m;
    f >> m;
    if (!m.at("splits").contains(split)) throw std::invalid_argument("load_split: unknown split '" + split + "'");
    Dataset ds;
    for (int64_t i : m.at("splits").at(split).get<std::vector<int64_t>>())
        ds.samples.push_back(read_sample(directory, i));
    return ds;
}

Dataset import_pseudo_depth(const std::string& image_dir, const std::string& depth_dir) {
    auto list_pngs = [](const std::string& dir) {
        std::map<std::string, fs::path> out;
        if (!fs::exists(dir)) throw std::runtime_error("import_pseudo_depth: no such directory '" + dir + "'");
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".png") out[e.path().stem().string()] = e.path();
        return out;
    };
    auto images = list_pngs(image_dir);
    auto depths = list_pngs(depth_dir);
    std::vector<std::string> unmatched;
    for (const auto& [stem, p] : images)
        if (!depths.count(stem)) unmatched.push_back("image without depth: " + p.string());
    for (const auto& [stem, p] : depths)
        if (!images.count(stem)) unmatched.push_back("depth without image: " + p.string());
    if (!unmatched.empty()) {
        std::string msg = "import_pseudo_depth: unmatched files:";
        for (const auto& u : unmatched) msg += "\n  " + u;
        throw std::runtime_error(msg);
    }
    Dataset ds;
    for (const auto& [stem, path] : images) {
        int64_t h = 0, w = 0;
        auto rgb = read_png_rgb8(path.string(), h, w);
        Sample s;
        s.image = Tensor::zeros({3, h, w});
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t c = 0; c < 3; ++c)
                    s.image.at(c, y, x) = static_cast<double>(rgb[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0;
        int64_t dh = 0, dw = 0;
        auto d16 = read_png_gray16(depths.at(stem).string(), dh, dw);
        if (dh != h || dw != w)
            throw std::runtime_error("import_pseudo_depth: extents of '" + depths.at(stem).string() +
                                     "' do not match its image");
        s.depth = Tensor::zeros({h, w});
        for (int64_t i = 0; i < h * w; ++i) s.depth[i] = static_cast<double>(d16[static_cast<size_t>(i)]) / 65535.0;
        s.mask = Tensor::zeros({h, w});
        s.intrinsics = {0.8 * static_cast<double>(w), 0.8 * static_cast<double>(w), static_cast<double>(w) / 2.0,
                        static_cast<double>(h) / 2.0};
        s.has_annotations = false;
        s.validate();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

json to_json(const SceneConfig& c) {
    return json{{"image_size", c.image_size},
                {"num_classes", c.num_classes},
                {"min_instruments", c.min_instruments},
                {"max_instruments", c.max_instruments},
                {"tube_width_min", c.tube_width_min},
                {"tube_width_max", c.tube_width_max},
                {"tube_length_min", c.tube_length_min},
                {"tube_length_max", c.tube_length_max},
                {"background_octaves", c.background_octaves},
                {"background_depth_min", c.background_depth_min},
                {"background_depth_max", c.background_depth_max},
                {"instrument_depth_min", c.instrument_depth_min},
                {"instrument_depth_max", c.instrument_depth_max},
                {"noise_level", c.noise_level},
                {"seed", c.seed}};
}

SceneConfig scene_config_from_json(const json& j) {
    SceneConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.min_instruments = j.value("min_instruments", c.min_instruments);
    c.max_instruments = j.value("max_instruments", c.max_instruments);
    c.tube_width_min = j.value("tube_width_min", c.tube_width_min);
    c.tube_width_max = j.value("tube_width_max", c.tube_width_max);
    c.tube_length_min = j.value("tube_length_min", c.tube_length_min);
    c.tube_length_max = j.value("tube_length_max", c.tube_length_max);
    c.background_octaves = j.value("background_octaves", c.background_octaves);
    c.background_depth_min = j.value("background_depth_min", c.background_depth_min);
    c.background_depth_max = j.value("background_depth_max", c.background_depth_max);
    c.instrument_depth_min = j.value("instrument_depth_min", c.instrument_depth_min);
    c.instrument_depth_max = j.value("instrument_depth_max", c.instrument_depth_max);
    c.noise_level = j.value("noise_level", c.noise_level);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

}  // namespace mtscene
