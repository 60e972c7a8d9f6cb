#include "mtscene/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "mtscene/metrics.hpp"

using nlohmann::json;

namespace mtscene {

int64_t ModelConfig::total_stride() const {
    int64_t s = 1;
    for (const auto& st : stages) s *= st.stride;
    return s;
}

void ModelConfig::validate() const {
    if (stages.empty()) throw std::invalid_argument("ModelConfig: need at least one stage");
    int64_t prev_dim = 0;
    for (const auto& st : stages) {
        if (st.patch_size < 1 || st.stride < 1 || st.stride > st.patch_size)
            throw std::invalid_argument("ModelConfig: need 1 <= stride <= patch_size per stage");
        if (st.embed_dim < prev_dim) throw std::invalid_argument("ModelConfig: stage dims must be non-decreasing");
        if (st.depth < 1) throw std::invalid_argument("ModelConfig: stage depth must be positive");
        if (st.num_heads < 1 || st.embed_dim % st.num_heads != 0)
            throw std::invalid_argument("ModelConfig: embed_dim must be divisible by num_heads");
        prev_dim = st.embed_dim;
    }
    if (!(drop_path_max >= 0.0 && drop_path_max < 1.0))
        throw std::invalid_argument("ModelConfig: drop_path_max must be in [0,1)");
    if (decoder_dim < 1) throw std::invalid_argument("ModelConfig: decoder_dim must be positive");
    if (mlp_ratio < 1) throw std::invalid_argument("ModelConfig: mlp_ratio must be positive");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes must be at least 2");
    if (det_classes < 1) throw std::invalid_argument("ModelConfig: det_classes must be positive");
}

json to_json(const ModelConfig& c) {
    json stages = json::array();
    for (const auto& s : c.stages)
        stages.push_back({{"patch_size", s.patch_size},
                          {"stride", s.stride},
                          {"embed_dim", s.embed_dim},
                          {"depth", s.depth},
                          {"num_heads", s.num_heads}});
    return json{{"stages", stages},         {"drop_path_max", c.drop_path_max}, {"decoder_dim", c.decoder_dim},
                {"mlp_ratio", c.mlp_ratio}, {"num_classes", c.num_classes},     {"det_classes", c.det_classes}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (j.contains("stages")) {
        c.stages.clear();
        for (const auto& js : j.at("stages")) {
            StageConfig s;
            s.patch_size = js.value("patch_size", s.patch_size);
            s.stride = js.value("stride", s.stride);
            s.embed_dim = js.value("embed_dim", s.embed_dim);
            s.depth = js.value("depth", s.depth);
            s.num_heads = js.value("num_heads", s.num_heads);
            c.stages.push_back(s);
        }
    }
    c.drop_path_max = j.value("drop_path_max", c.drop_path_max);
    c.decoder_dim = j.value("decoder_dim", c.decoder_dim);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.det_classes = j.value("det_classes", c.det_classes);
    c.validate();
    return c;
}

namespace {

Tensor randn_tensor(std::vector<int64_t> shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, std);
    return t;
}

int silu(Tape& t, int x) { return t.mul(x, t.sigmoid_(x)); }

}  // namespace

Model::Model(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params(init_seed);
}

void Model::build_params(uint64_t init_seed) {
    Rng rng(mix_seed(init_seed, 0xC0DE));
    auto linear = [&](const std::string& name, int64_t in, int64_t out) {
        params_.add(name + ".w", randn_tensor({in, out}, std::sqrt(2.0 / static_cast<double>(in)), rng));
        params_.add(name + ".b", Tensor::zeros({out}));
    };
    auto conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k) {
        params_.add(name + ".w",
                    randn_tensor({cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k)), rng));
        params_.add(name + ".b", Tensor::zeros({cout}));
    };
    auto norm = [&](const std::string& name, int64_t d) {
        params_.add(name + ".g", Tensor::full({d}, 1.0));
        params_.add(name + ".b", Tensor::zeros({d}));
    };

    int64_t cin = 3;
    for (size_t i = 0; i < cfg_.stages.size(); ++i) {
        const auto& st = cfg_.stages[i];
        std::string sp = "encoder.stage" + std::to_string(i);
        conv(sp + ".embed", st.embed_dim, cin, st.patch_size);
        for (int64_t b = 0; b < st.depth; ++b) {
            std::string bp = sp + ".block" + std::to_string(b);
            norm(bp + ".ln1", st.embed_dim);
            linear(bp + ".attn.q", st.embed_dim, st.embed_dim);
            // no key bias: it cancels in the row softmax (zero gradient)
            params_.add(bp + ".attn.k.w", randn_tensor({st.embed_dim, st.embed_dim},
                                                       std::sqrt(2.0 / static_cast<double>(st.embed_dim)), rng));
            linear(bp + ".attn.v", st.embed_dim, st.embed_dim);
            linear(bp + ".attn.o", st.embed_dim, st.embed_dim);
            norm(bp + ".ln2", st.embed_dim);
            linear(bp + ".mlp.fc1", st.embed_dim, st.embed_dim * cfg_.mlp_ratio);
            linear(bp + ".mlp.fc2", st.embed_dim * cfg_.mlp_ratio, st.embed_dim);
        }
        norm(sp + ".norm", st.embed_dim);
        cin = st.embed_dim;
    }
    for (size_t i = 0; i < cfg_.stages.size(); ++i)
        conv("decoder.proj" + std::to_string(i), cfg_.decoder_dim, cfg_.stages[i].embed_dim, 1);
    conv("decoder.mix", cfg_.decoder_dim, cfg_.decoder_dim * static_cast<int64_t>(cfg_.stages.size()), 1);

    conv("head.seg.hidden", cfg_.decoder_dim, cfg_.decoder_dim, 1);
    conv("head.seg.out", cfg_.num_classes, cfg_.decoder_dim, 1);
    conv("head.depth.hidden", cfg_.decoder_dim, cfg_.decoder_dim, 1);
    // extra half-resolution refinement: quarter-res depth blurs instrument
    // boundaries too much for millimeter-level error
    conv("head.depth.refine", 16, cfg_.decoder_dim, 3);
    conv("head.depth.out", 1, 16, 1);
    conv("head.det.hidden", cfg_.decoder_dim, cfg_.decoder_dim, 1);
    conv("head.det.out", 5 + cfg_.det_classes, cfg_.decoder_dim, 1);
    // detection priors: background-leaning objectness, box offsets near one cell
    auto& det_b = params_.at("head.det.out.b").value;
    det_b[0] = -2.0;
    for (int i = 1; i <= 4; ++i) det_b[i] = 1.0;
}

std::vector<int> Model::shared_param_ids() const {
    std::vector<int> ids;
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto& name = params_.at(static_cast<int>(i)).name;
        if (name.rfind("encoder.", 0) == 0 || name.rfind("decoder.", 0) == 0) ids.push_back(static_cast<int>(i));
    }
    return ids;
}

std::vector<int> Model::encoder_forward(Tape& t, const Tensor& image, bool training, Rng* drop_rng) const {
    if (image.ndim() != 3 || image.shape[0] != 3)
        throw std::invalid_argument("encoder: expected [3,H,W] image, got " + image.shape_str());
    int64_t ts = cfg_.total_stride();
    if (image.shape[1] % ts != 0 || image.shape[2] % ts != 0)
        throw std::invalid_argument("encoder: image extents " + image.shape_str() +
                                    " must be divisible by the total stride " + std::to_string(ts));
    ParamStore& ps = const_cast<ParamStore&>(params_);
    int64_t total_blocks = 0;
    for (const auto& st : cfg_.stages) total_blocks += st.depth;

    std::vector<int> features;
    int x = t.leaf(image, "image");
    int64_t h = image.shape[1], w = image.shape[2];
    int64_t block_index = 0;
    for (size_t i = 0; i < cfg_.stages.size(); ++i) {
        const auto& st = cfg_.stages[i];
        std::string sp = "encoder.stage" + std::to_string(i);
        int64_t pad = st.patch_size / 2;
        x = t.conv2d(x, t.param(ps, sp + ".embed.w"), t.param(ps, sp + ".embed.b"), st.stride, pad);
        h = (h + 2 * pad - st.patch_size) / st.stride + 1;
        w = (w + 2 * pad - st.patch_size) / st.stride + 1;
        int64_t n = h * w, d = st.embed_dim;
        int tok = t.transpose(t.reshape(x, {d, n}));  // [N, D]

        for (int64_t b = 0; b < st.depth; ++b, ++block_index) {
            std::string bp = sp + ".block" + std::to_string(b);
            double p = total_blocks > 1 ? cfg_.drop_path_max * static_cast<double>(block_index) /
                                              static_cast<double>(total_blocks - 1)
                                        : 0.0;
            auto gate = [&](int branch) {
                if (!training || p <= 0.0) return branch;
                if (!drop_rng) throw std::invalid_argument("encoder: training forward needs a drop-path rng");
                bool keep = drop_rng->bernoulli(1.0 - p);
                return keep ? t.mul_scalar(branch, 1.0 / (1.0 - p)) : t.mul_scalar(branch, 0.0);
            };

            // attention branch
            int y = t.layer_norm(tok, t.param(ps, bp + ".ln1.g"), t.param(ps, bp + ".ln1.b"));
            int q = t.add_row_bias(t.matmul(y, t.param(ps, bp + ".attn.q.w")), t.param(ps, bp + ".attn.q.b"));
            int k = t.matmul(y, t.param(ps, bp + ".attn.k.w"));
            int v = t.add_row_bias(t.matmul(y, t.param(ps, bp + ".attn.v.w")), t.param(ps, bp + ".attn.v.b"));
            int64_t dh = d / st.num_heads;
            double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<int> head_outs;
            for (int64_t hd = 0; hd < st.num_heads; ++hd) {
                int qh = t.slice_cols(q, hd * dh, (hd + 1) * dh);
                int kh = t.slice_cols(k, hd * dh, (hd + 1) * dh);
                int vh = t.slice_cols(v, hd * dh, (hd + 1) * dh);
                int att = t.softmax_rows(t.mul_scalar(t.matmul(qh, t.transpose(kh)), scale));
                head_outs.push_back(t.matmul(att, vh));
            }
            int att_out = head_outs.size() == 1 ? head_outs[0] : t.concat_cols(head_outs);
            att_out = t.add_row_bias(t.matmul(att_out, t.param(ps, bp + ".attn.o.w")), t.param(ps, bp + ".attn.o.b"));
            tok = t.add(tok, gate(att_out));

            // feed-forward branch
            int z = t.layer_norm(tok, t.param(ps, bp + ".ln2.g"), t.param(ps, bp + ".ln2.b"));
            int h1 = t.add_row_bias(t.matmul(z, t.param(ps, bp + ".mlp.fc1.w")), t.param(ps, bp + ".mlp.fc1.b"));
            int h2 = t.add_row_bias(t.matmul(silu(t, h1), t.param(ps, bp + ".mlp.fc2.w")),
                                    t.param(ps, bp + ".mlp.fc2.b"));
            tok = t.add(tok, gate(h2));
        }
        tok = t.layer_norm(tok, t.param(ps, sp + ".norm.g"), t.param(ps, sp + ".norm.b"));
        x = t.reshape(t.transpose(tok), {d, h, w});
        features.push_back(x);
    }
    return features;
}

int Model::decoder_forward(Tape& t, const std::vector<int>& features, int64_t out_h, int64_t out_w) const {
    if (features.empty()) throw std::invalid_argument("decoder: empty feature sequence");
    ParamStore& ps = const_cast<ParamStore&>(params_);
    std::vector<int> resized;
    for (size_t i = 0; i < features.size(); ++i) {
        std::string pp = "decoder.proj" + std::to_string(i);
        int proj = t.conv2d(features[i], t.param(ps, pp + ".w"), t.param(ps, pp + ".b"), 1, 0);
        resized.push_back(t.bilinear_resize(proj, out_h, out_w));
    }
    int cat = resized.size() == 1 ? resized[0] : t.concat_chan(resized);
    return t.conv2d(cat, t.param(ps, "decoder.mix.w"), t.param(ps, "decoder.mix.b"), 1, 0);
}

Model::Forward Model::heads_forward(Tape& t, int fused, int64_t image_h, int64_t image_w) const {
    ParamStore& ps = const_cast<ParamStore&>(params_);
    auto head = [&](const std::string& name) {
        int h = silu(t, t.conv2d(fused, t.param(ps, "head." + name + ".hidden.w"),
                                 t.param(ps, "head." + name + ".hidden.b"), 1, 0));
        return t.conv2d(h, t.param(ps, "head." + name + ".out.w"), t.param(ps, "head." + name + ".out.b"), 1, 0);
    };
    Forward f;
    f.fused = fused;
    f.seg_logits = t.bilinear_resize(head("seg"), image_h, image_w);
    // depth head refines at half resolution before the final upsample
    int dh = silu(t, t.conv2d(fused, t.param(ps, "head.depth.hidden.w"), t.param(ps, "head.depth.hidden.b"), 1, 0));
    int dup = t.bilinear_resize(dh, image_h / 2, image_w / 2);
    int dref = silu(t, t.conv2d(dup, t.param(ps, "head.depth.refine.w"), t.param(ps, "head.depth.refine.b"), 1, 1));
    int depth_h = t.sigmoid_(t.conv2d(dref, t.param(ps, "head.depth.out.w"), t.param(ps, "head.depth.out.b"), 1, 0));
    f.depth = t.reshape(t.bilinear_resize(depth_h, image_h, image_w), {image_h, image_w});
    f.det = head("det");
    const Tensor& dg = t.val(f.det);
    f.det_meta.grid_h = dg.shape[1];
    f.det_meta.grid_w = dg.shape[2];
    f.det_meta.stride = image_h / dg.shape[1];
    f.det_meta.num_classes = cfg_.det_classes;
    return f;
}

Model::Forward Model::forward(Tape& t, const Tensor& image, bool training, Rng* drop_rng) const {
    auto features = encoder_forward(t, image, training, drop_rng);
    int64_t h4 = image.shape[1] / 4, w4 = image.shape[2] / 4;
    int fused = decoder_forward(t, features, h4, w4);
    Forward f = heads_forward(t, fused, image.shape[1], image.shape[2]);
    f.stage_features = std::move(features);
    return f;
}

std::vector<MatchedCell> match_targets(const std::vector<Box>& boxes, const DetGridMeta& meta) {
    if (meta.grid_h < 1 || meta.grid_w < 1 || meta.stride < 1)
        throw std::invalid_argument("match_targets: invalid grid");
    std::map<int64_t, std::pair<double, MatchedCell>> best;  // cell -> (area, match)
    for (const auto& b : boxes) {
        if (b.area() <= 0) throw std::invalid_argument("match_targets: zero-area box");
        int64_t cx = static_cast<int64_t>(std::floor(b.cx() / static_cast<double>(meta.stride)));
        int64_t cy = static_cast<int64_t>(std::floor(b.cy() / static_cast<double>(meta.stride)));
        cx = std::clamp<int64_t>(cx, 0, meta.grid_w - 1);
        cy = std::clamp<int64_t>(cy, 0, meta.grid_h - 1);
        MatchedCell m;
        m.cy = cy;
        m.cx = cx;
        m.cls = b.cls - 1;  // ground-truth classes are 1-based
        double ccx = (static_cast<double>(cx) + 0.5) * static_cast<double>(meta.stride);
        double ccy = (static_cast<double>(cy) + 0.5) * static_cast<double>(meta.stride);
        m.ltrb[0] = ccx - b.x0;
        m.ltrb[1] = ccy - b.y0;
        m.ltrb[2] = b.x1 - ccx;
        m.ltrb[3] = b.y1 - ccy;
        int64_t key = cy * meta.grid_w + cx;
        auto it = best.find(key);
        if (it == best.end() || b.area() > it->second.first) best[key] = {b.area(), m};
    }
    std::vector<MatchedCell> out;
    out.reserve(best.size());
    for (const auto& [key, v] : best) out.push_back(v.second);
    return out;
}

std::vector<Detection> decode_detections(const Tensor& det_grid, const DetGridMeta& meta,
                                         double objectness_threshold, double nms_iou) {
    if (!(objectness_threshold >= 0 && objectness_threshold <= 1) || !(nms_iou >= 0 && nms_iou <= 1))
        throw std::invalid_argument("decode_detections: thresholds must be in [0,1]");
    if (det_grid.ndim() != 3 || det_grid.shape[0] != meta.channels() || det_grid.shape[1] != meta.grid_h ||
        det_grid.shape[2] != meta.grid_w)
        throw std::invalid_argument("decode_detections: grid shape mismatch");
    double img_w = static_cast<double>(meta.grid_w * meta.stride);
    double img_h = static_cast<double>(meta.grid_h * meta.stride);
    std::vector<Detection> cand;
    for (int64_t cy = 0; cy < meta.grid_h; ++cy)
        for (int64_t cx = 0; cx < meta.grid_w; ++cx) {
            double obj = 1.0 / (1.0 + std::exp(-det_grid.at(0, cy, cx)));
            if (obj <= objectness_threshold) continue;
            double ccx = (static_cast<double>(cx) + 0.5) * static_cast<double>(meta.stride);
            double ccy = (static_cast<double>(cy) + 0.5) * static_cast<double>(meta.stride);
            double off[4];
            for (int i = 0; i < 4; ++i)
                off[i] = static_cast<double>(meta.stride) * std::exp(det_grid.at(1 + i, cy, cx));
            Detection d;
            d.box.x0 = std::clamp(ccx - off[0], 0.0, img_w);
            d.box.y0 = std::clamp(ccy - off[1], 0.0, img_h);
            d.box.x1 = std::clamp(ccx + off[2], 0.0, img_w);
            d.box.y1 = std::clamp(ccy + off[3], 0.0, img_h);
            if (d.box.x1 <= d.box.x0 || d.box.y1 <= d.box.y0) continue;
            int best_cls = 0;
            double cls_prob = 1.0;
            if (meta.num_classes > 1) {
                double m = det_grid.at(5, cy, cx);
                for (int64_t c = 1; c < meta.num_classes; ++c)
                    if (det_grid.at(5 + c, cy, cx) > m) {
                        m = det_grid.at(5 + c, cy, cx);
                        best_cls = static_cast<int>(c);
                    }
                double s = 0.0;
                for (int64_t c = 0; c < meta.num_classes; ++c) s += std::exp(det_grid.at(5 + c, cy, cx) - m);
                cls_prob = 1.0 / s;
            }
            d.box.cls = best_cls + 1;
            d.score = obj * cls_prob;
            cand.push_back(d);
        }
    std::stable_sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& d : cand) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.box.cls == d.box.cls && iou_box(k.box, d.box) >= nms_iou && nms_iou > 0) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// ---------------- checkpoint ----------------

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    f.write("MTSC", 4);
    put<uint32_t>(f, kCheckpointVersion);
    std::string cfg = to_json(model.config()).dump();
    put<uint32_t>(f, static_cast<uint32_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const ParamStore& ps = model.params();
    put<uint32_t>(f, static_cast<uint32_t>(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.at(static_cast<int>(i));
        put<uint16_t>(f, static_cast<uint16_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<uint8_t>(f, static_cast<uint8_t>(e.value.ndim()));
        for (int64_t d : e.value.shape) put<int64_t>(f, d);
    }
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.at(static_cast<int>(i));
        for (double v : e.value.data) put<float>(f, static_cast<float>(v));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MTSC", 4) != 0)
        throw std::runtime_error("load_checkpoint: '" + path + "' is not a checkpoint");
    uint32_t version = get<uint32_t>(f);
    if (version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    uint32_t cfg_len = get<uint32_t>(f);
    std::string cfg_str(cfg_len, '\0');
    f.read(cfg_str.data(), cfg_len);
    if (!f) throw std::runtime_error("load_checkpoint: truncated config");
    Model model(model_config_from_json(json::parse(cfg_str)), 0);

    uint32_t n = get<uint32_t>(f);
    ParamStore& ps = model.params();
    if (n != ps.size())
        throw std::runtime_error("load_checkpoint: manifest has " + std::to_string(n) + " parameters, model has " +
                                 std::to_string(ps.size()));
    std::vector<std::pair<std::string, std::vector<int64_t>>> manifest;
    for (uint32_t i = 0; i < n; ++i) {
        uint16_t len = get<uint16_t>(f);
        std::string name(len, '\0');
        f.read(name.data(), len);
        uint8_t nd = get<uint8_t>(f);
        std::vector<int64_t> shape;
        for (uint8_t d = 0; d < nd; ++d) shape.push_back(get<int64_t>(f));
        manifest.emplace_back(std::move(name), std::move(shape));
    }
    for (uint32_t i = 0; i < n; ++i) {
        auto& e = ps.at(static_cast<int>(i));
        if (e.name != manifest[i].first || e.value.shape != manifest[i].second)
            throw std::runtime_error("load_checkpoint: parameter mismatch at index " + std::to_string(i) +
                                     ": file has '" + manifest[i].first + "', model expects '" + e.name + "'");
        for (int64_t k = 0; k < e.value.numel(); ++k) e.value[k] = static_cast<double>(get<float>(f));
    }
    return model;
}

}  // namespace mtscene
