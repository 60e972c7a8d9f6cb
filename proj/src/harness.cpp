#include "mtscene/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>

#include "mtscene/gradcheck.hpp"
#include "mtscene/png_io.hpp"
#include "mtscene/recon3d.hpp"
#include "mtscene/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtscene {

// ---------------- configs ----------------

void OptimizerConfig::validate() const {
    if (kind != "adamw") throw std::invalid_argument("OptimizerConfig: unknown kind '" + kind + "'");
    if (!(learning_rate > 0)) throw std::invalid_argument("OptimizerConfig: learning_rate must be positive");
    if (!(weight_decay >= 0)) throw std::invalid_argument("OptimizerConfig: weight_decay must be non-negative");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
        throw std::invalid_argument("OptimizerConfig: betas must be in (0,1)");
    if (!(eps > 0)) throw std::invalid_argument("OptimizerConfig: eps must be positive");
}

void SchedulerConfig::validate() const {
    if (!(exp_gamma > 0 && exp_gamma <= 1)) throw std::invalid_argument("SchedulerConfig: exp_gamma must be in (0,1]");
    if (!(plateau_factor > 0 && plateau_factor < 1))
        throw std::invalid_argument("SchedulerConfig: plateau_factor must be in (0,1)");
    if (plateau_patience < 1) throw std::invalid_argument("SchedulerConfig: plateau_patience must be positive");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(objectness_threshold >= 0 && objectness_threshold <= 1))
        throw std::invalid_argument("TrainConfig: objectness_threshold must be in [0,1]");
    if (!(nms_iou >= 0 && nms_iou <= 1)) throw std::invalid_argument("TrainConfig: nms_iou must be in [0,1]");
    model.validate();
    scene.validate();
    seg_loss.validate();
    depth_loss.validate();
    balancer.validate();
    optimizer.validate();
    schedulers.validate();
    if (seg_loss.num_classes != model.num_classes)
        throw std::invalid_argument("TrainConfig: seg_loss.num_classes must match model.num_classes");
}

namespace {

json optimizer_json(const OptimizerConfig& c) {
    return json{{"kind", c.kind},   {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
                {"beta1", c.beta1}, {"beta2", c.beta2},                 {"eps", c.eps}};
}

OptimizerConfig optimizer_from_json(const json& j) {
    OptimizerConfig c;
    c.kind = j.value("kind", c.kind);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    return c;
}

json scheduler_json(const SchedulerConfig& c) {
    return json{{"exponential", {{"gamma", c.exp_gamma}}},
                {"reduce_on_plateau", {{"factor", c.plateau_factor}, {"patience", c.plateau_patience}}}};
}

SchedulerConfig scheduler_from_json(const json& j) {
    SchedulerConfig c;
    if (j.contains("exponential")) c.exp_gamma = j["exponential"].value("gamma", c.exp_gamma);
    if (j.contains("reduce_on_plateau")) {
        c.plateau_factor = j["reduce_on_plateau"].value("factor", c.plateau_factor);
        c.plateau_patience = j["reduce_on_plateau"].value("patience", c.plateau_patience);
    }
    return c;
}

json balancer_json(const BalancerConfig& c) {
    return json{{"eta", c.eta},
                {"eps", c.eps},
                {"lambda_reg", c.lambda_reg},
                {"sign", c.sign == BalancerSign::AsWritten ? "as-written" : "amplify-high-loss"},
                {"mode", to_string(c.mode)},
                {"align_every", c.align_every}};
}

BalancerConfig balancer_from_json(const json& j) {
    BalancerConfig c;
    c.eta = j.value("eta", c.eta);
    c.eps = j.value("eps", c.eps);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    if (j.contains("sign")) {
        std::string s = j["sign"];
        if (s == "as-written")
            c.sign = BalancerSign::AsWritten;
        else if (s == "amplify-high-loss")
            c.sign = BalancerSign::AmplifyHighLoss;
        else
            throw std::invalid_argument("BalancerConfig: unknown sign '" + s + "'");
    }
    if (j.contains("mode")) c.mode = balancer_mode_from_string(j["mode"]);
    c.align_every = j.value("align_every", c.align_every);
    return c;
}

json seg_loss_json(const SegLossConfig& c) {
    return json{{"alpha", c.alpha}, {"beta", c.beta}, {"num_classes", c.num_classes}, {"binary_mode", c.binary_mode}};
}

SegLossConfig seg_loss_from_json(const json& j) {
    SegLossConfig c;
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.binary_mode = j.value("binary_mode", c.binary_mode);
    return c;
}

json depth_loss_json(const DepthLossConfig& c) {
    return json{{"w_ssim", c.w_ssim},           {"w_edge", c.w_edge},   {"w_mae", c.w_mae},
                {"ssim_window", c.ssim_window}, {"ssim_c1", c.ssim_c1}, {"ssim_c2", c.ssim_c2}};
}

DepthLossConfig depth_loss_from_json(const json& j) {
    DepthLossConfig c;
    c.w_ssim = j.value("w_ssim", c.w_ssim);
    c.w_edge = j.value("w_edge", c.w_edge);
    c.w_mae = j.value("w_mae", c.w_mae);
    c.ssim_window = j.value("ssim_window", c.ssim_window);
    c.ssim_c1 = j.value("ssim_c1", c.ssim_c1);
    c.ssim_c2 = j.value("ssim_c2", c.ssim_c2);
    return c;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace

json to_json(const TrainConfig& c) {
    return json{{"dataset_dir", c.dataset_dir},
                {"out_dir", c.out_dir},
                {"model", to_json(c.model)},
                {"scene", to_json(c.scene)},
                {"seg_loss", seg_loss_json(c.seg_loss)},
                {"depth_loss", depth_loss_json(c.depth_loss)},
                {"balancer", balancer_json(c.balancer)},
                {"optimizer", optimizer_json(c.optimizer)},
                {"schedulers", scheduler_json(c.schedulers)},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"objectness_threshold", c.objectness_threshold},
                {"nms_iou", c.nms_iou}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("scene")) c.scene = scene_config_from_json(j["scene"]);
    if (j.contains("seg_loss")) c.seg_loss = seg_loss_from_json(j["seg_loss"]);
    if (j.contains("depth_loss")) c.depth_loss = depth_loss_from_json(j["depth_loss"]);
    if (j.contains("balancer")) c.balancer = balancer_from_json(j["balancer"]);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j["optimizer"]);
    if (j.contains("schedulers")) c.schedulers = scheduler_from_json(j["schedulers"]);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.objectness_threshold = j.value("objectness_threshold", c.objectness_threshold);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    json j;
    f >> j;
    return train_config_from_json(j);
}

// ---------------- optimizer ----------------

AdamW::AdamW(ParamStore& params, OptimizerConfig cfg) : params_(params), cfg_(std::move(cfg)) {
    cfg_.validate();
    for (size_t i = 0; i < params_.size(); ++i) {
        m_.push_back(Tensor::zeros(params_.at(static_cast<int>(i)).value.shape));
        v_.push_back(Tensor::zeros(params_.at(static_cast<int>(i)).value.shape));
    }
}

void AdamW::step(double lr) {
    if (!(lr > 0)) throw std::invalid_argument("AdamW: lr must be positive");
    t_ += 1;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& e = params_.at(static_cast<int>(i));
        if (!e.trainable) continue;
        for (int64_t k = 0; k < e.value.numel(); ++k) {
            double g = e.grad[k];
            double& m = m_[i][k];
            double& v = v_[i][k];
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
            double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            e.value[k] -= lr * update + lr * cfg_.weight_decay * e.value[k];
        }
    }
}

// ---------------- run log ----------------

void RunLog::append(const RunLogRow& r) {
    if (!rows.empty() && r.step <= rows.back().step)
        throw std::invalid_argument("RunLog: steps must be strictly increasing");
    WeightVector(std::vector<double>{r.w_seg, r.w_depth, r.w_det}).validate();
    rows.push_back(r);
}

std::string RunLog::to_csv() const {
    std::string s = "step,epoch,lr,loss_seg,loss_depth,loss_det,loss_total,w_seg,w_depth,w_det\n";
    for (const auto& r : rows) {
        s += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_g(r.lr) + "," + fmt_g(r.loss_seg) +
             "," + fmt_g(r.loss_depth) + "," + fmt_g(r.loss_det) + "," + fmt_g(r.loss_total) + "," + fmt_g(r.w_seg) +
             "," + fmt_g(r.w_depth) + "," + fmt_g(r.w_det) + "\n";
    }
    return s;
}

void RunLog::write(const std::string& path) const { write_text_file(path, to_csv()); }

// ---------------- shared forward/loss plumbing ----------------

namespace {

struct SampleGraph {
    std::unique_ptr<Tape> tape;
    Model::Forward fwd;
    LossNode seg, depth, det;
};

SampleGraph build_sample_graph(const Model& model, const Sample& s, const TrainConfig& cfg, bool training,
                               Rng* drop_rng) {
    SampleGraph g;
    g.tape = std::make_unique<Tape>();
    Tape& t = *g.tape;
    g.fwd = model.forward(t, s.image, training, drop_rng);
    g.seg = seg_loss(t, g.fwd.seg_logits, s.mask, cfg.seg_loss);
    g.depth = depth_loss(t, g.fwd.depth, s.depth, cfg.depth_loss);
    auto matches = match_targets(s.boxes, g.fwd.det_meta);
    g.det = detection_loss(t, g.fwd.det, g.fwd.det_meta, matches, static_cast<int64_t>(s.boxes.size()));
    return g;
}

Tensor argmax_classes(const Tensor& logits) {  // [C,H,W] -> [H,W]
    int64_t c = logits.shape[0], h = logits.shape[1], w = logits.shape[2];
    Tensor out = Tensor::zeros({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            int64_t best = 0;
            double bv = logits.at(0, y, x);
            for (int64_t k = 1; k < c; ++k)
                if (logits.at(k, y, x) > bv) {
                    bv = logits.at(k, y, x);
                    best = k;
                }
            out.at(y, x) = static_cast<double>(best);
        }
    return out;
}

Tensor binarize(const Tensor& classes) {
    Tensor out = classes;
    for (double& v : out.data) v = v != 0.0 ? 1.0 : 0.0;
    return out;
}

}  // namespace

EvalReport evaluate(const Model& model, const Dataset& data, const EvalOptions& opts) {
    if (data.samples.empty()) throw std::invalid_argument("evaluate: empty split");
    EvalReport rep;
    double dice_sum = 0, miou_sum = 0, mae_sum = 0;
    std::vector<std::vector<Detection>> all_dets;
    std::vector<std::vector<Box>> all_gts;
    for (const auto& s : data.samples) {
        Tape t;
        auto fwd = model.forward(t, s.image, false, nullptr);
        Tensor pred_classes = argmax_classes(t.val(fwd.seg_logits));
        dice_sum += dice(binarize(pred_classes), binarize(s.mask));
        miou_sum += miou_hard(pred_classes, s.mask, model.config().num_classes);
        mae_sum += depth_mae_mm(t.val(fwd.depth), s.depth, s.depth_scale_mm);
        all_dets.push_back(decode_detections(t.val(fwd.det), fwd.det_meta, opts.objectness_threshold, opts.nms_iou));
        all_gts.push_back(s.boxes);
        rep.instances += static_cast<int64_t>(s.boxes.size());
    }
    rep.images = static_cast<int64_t>(data.samples.size());
    double n = static_cast<double>(rep.images);
    rep.dice = dice_sum / n;
    rep.miou = miou_sum / n;
    rep.depth_mae_mm = mae_sum / n;
    rep.per_class_ap = dataset_average_precision(all_dets, all_gts, opts.map_iou);
    if (!rep.per_class_ap.empty()) {
        double s = 0;
        for (const auto& [cls, ap] : rep.per_class_ap) s += ap;
        rep.map50 = s / static_cast<double>(rep.per_class_ap.size());
    }
    return rep;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& dataset_dir,
                               const std::string& split, const EvalOptions& opts) {
    Model model = load_checkpoint(checkpoint_path);
    Dataset data = load_split(dataset_dir, split);
    return evaluate(model, data, opts);
}

// ---------------- training ----------------

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    Dataset tr = load_split(cfg.dataset_dir, "train");
    Dataset va = load_split(cfg.dataset_dir, "val");
    if (tr.samples.empty()) throw std::runtime_error("train: empty train split in '" + cfg.dataset_dir + "'");
    if (va.samples.empty()) throw std::runtime_error("train: empty val split in '" + cfg.dataset_dir + "'");

    Model model(cfg.model, cfg.seed);
    ParamStore& ps = model.params();
    AdamW opt(ps, cfg.optimizer);
    BalancerState bstate{WeightVector::uniform(3), 0};
    Rng drop_rng(mix_seed(cfg.seed, 0xD209));
    RunLog log;
    EvalOptions eopts{cfg.objectness_threshold, cfg.nms_iou, 0.5};

    std::vector<int> shared = model.shared_param_ids();
    int64_t shared_numel = 0;
    for (int id : shared) shared_numel += ps.at(id).value.numel();

    const std::string best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
    const std::string final_path = (fs::path(cfg.out_dir) / "final.ckpt").string();
    const std::string runlog_path = (fs::path(cfg.out_dir) / "runlog.csv").string();

    // snapshot of the most recent all-finite parameter state
    std::vector<Tensor> last_good;
    for (size_t i = 0; i < ps.size(); ++i) last_good.push_back(ps.at(static_cast<int>(i)).value);
    auto snapshot_if_finite = [&]() {
        for (size_t i = 0; i < ps.size(); ++i)
            for (double v : ps.at(static_cast<int>(i)).value.data)
                if (!std::isfinite(v)) return;
        for (size_t i = 0; i < ps.size(); ++i) last_good[i] = ps.at(static_cast<int>(i)).value;
    };
    auto abort_with_last_good = [&](const std::string& what, int64_t step) -> void {
        for (size_t i = 0; i < ps.size(); ++i) ps.at(static_cast<int>(i)).value = last_good[i];
        const std::string path = (fs::path(cfg.out_dir) / "last_good.ckpt").string();
        save_checkpoint(path, model);
        log.write(runlog_path);
        throw std::runtime_error("train: " + what + " at step " + std::to_string(step) +
                                 "; last good parameters saved to '" + path + "'");
    };

    double plateau_scale = 1.0, plateau_best = std::numeric_limits<double>::infinity();
    int64_t plateau_bad = 0;
    double best_val = std::numeric_limits<double>::infinity();
    TrainResult result;
    std::string val_csv = "epoch,val_total_loss,lr," + EvalReport::csv_header() + "\n";
    int64_t gstep = 0;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.optimizer.learning_rate * std::pow(cfg.schedulers.exp_gamma, static_cast<double>(epoch)) *
                    plateau_scale;
        std::vector<size_t> order(tr.samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuf(mix_seed(cfg.seed, 0xE000 + static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuf.uniform_int(0, static_cast<int64_t>(i) - 1)]);

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            double nb = static_cast<double>(end - start);

            std::vector<SampleGraph> graphs;
            double mean_seg = 0, mean_depth = 0, mean_det = 0;
            for (size_t i = start; i < end; ++i) {
                // loss constructors reject non-finite activations; treat that as divergence
                try {
                    graphs.push_back(build_sample_graph(model, tr.samples[order[i]], cfg, true, &drop_rng));
                } catch (const std::invalid_argument& e) {
                    abort_with_last_good(std::string("diverged while building losses: ") + e.what(), gstep + 1);
                }
                const auto& g = graphs.back();
                double ls = g.tape->scalar(g.seg.value);
                double ld = g.tape->scalar(g.depth.value);
                double lt = g.tape->scalar(g.det.value);
                if (!std::isfinite(ls)) abort_with_last_good("non-finite segmentation loss", gstep + 1);
                if (!std::isfinite(ld)) abort_with_last_good("non-finite depth loss", gstep + 1);
                if (!std::isfinite(lt)) abort_with_last_good("non-finite detection loss", gstep + 1);
                mean_seg += ls / nb;
                mean_depth += ld / nb;
                mean_det += lt / nb;
            }
            std::vector<double> losses = {mean_seg, mean_depth, mean_det};

            TaskGradients grads;
            const TaskGradients* grads_ptr = nullptr;
            bool need_grads = cfg.balancer.mode == BalancerMode::GradientAlignment &&
                              (bstate.step + 1) % cfg.balancer.align_every == 0;
            if (need_grads) {
                grads = TaskGradients(3, shared_numel);
                for (int task = 0; task < 3; ++task) {
                    ps.zero_grad();
                    for (auto& g : graphs) {
                        int node = task == 0 ? g.seg.value : task == 1 ? g.depth.value : g.det.value;
                        g.tape->backward(node, Tensor::full(g.tape->val(node).shape, 1.0 / nb));
                    }
                    int64_t off = 0;
                    for (int id : shared) {
                        const Tensor& gr = ps.at(id).grad;
                        for (int64_t k = 0; k < gr.numel(); ++k) grads.at(task, off + k) = gr[k];
                        off += gr.numel();
                    }
                }
                grads_ptr = &grads;
            }

            WeightVector w = next_weights(bstate, losses, grads_ptr, cfg.balancer);

            ps.zero_grad();
            double mean_total = 0;
            for (auto& g : graphs) {
                auto nodes = total_loss(*g.tape, g.seg, g.depth, g.det, w);
                mean_total += g.tape->scalar(nodes.total) / nb;
                g.tape->backward(nodes.total, Tensor::full(g.tape->val(nodes.total).shape, 1.0 / nb));
            }
            if (!std::isfinite(mean_total)) abort_with_last_good("non-finite total loss", gstep + 1);
            opt.step(lr);
            snapshot_if_finite();

            gstep += 1;
            log.append({gstep, epoch, lr, mean_seg, mean_depth, mean_det, mean_total, w.w[0], w.w[1], w.w[2]});
        }

        // validation: losses under current weights plus task metrics
        double val_total = 0;
        for (const auto& s : va.samples) {
            SampleGraph g;
            try {
                g = build_sample_graph(model, s, cfg, false, nullptr);
            } catch (const std::invalid_argument& e) {
                abort_with_last_good(std::string("diverged while building losses: ") + e.what(), gstep);
            }
            double ls = g.tape->scalar(g.seg.value), ld = g.tape->scalar(g.depth.value),
                   lt = g.tape->scalar(g.det.value);
            if (!std::isfinite(ls + ld + lt)) abort_with_last_good("non-finite validation loss", gstep);
            val_total += (bstate.weights.w[0] * ls + bstate.weights.w[1] * ld + bstate.weights.w[2] * lt) /
                         static_cast<double>(va.samples.size());
        }
        EvalReport rep = evaluate(model, va, eopts);
        val_csv += std::to_string(epoch) + "," + fmt_g(val_total) + "," + fmt_g(lr) + "," +
                   rep.csv_row("epoch" + std::to_string(epoch)) + "\n";

        if (val_total < best_val) {
            best_val = val_total;
            save_checkpoint(best_path, model);
            result.best_val = rep;
        }
        result.final_val = rep;

        // plateau scheduler: only ever decreases the learning rate
        if (val_total < plateau_best - 1e-12) {
            plateau_best = val_total;
            plateau_bad = 0;
        } else if (++plateau_bad >= cfg.schedulers.plateau_patience) {
            plateau_scale *= cfg.schedulers.plateau_factor;
            plateau_bad = 0;
        }
    }

    save_checkpoint(final_path, model);
    log.write(runlog_path);
    write_text_file((fs::path(cfg.out_dir) / "val_log.csv").string(), val_csv);
    write_text_file((fs::path(cfg.out_dir) / "config.json").string(), to_json(cfg).dump(2) + "\n");
    write_loss_svg(log, (fs::path(cfg.out_dir) / "loss.svg").string());
    write_weight_svg(log, (fs::path(cfg.out_dir) / "weights.svg").string());

    result.checkpoint_path = best_path;
    result.runlog_path = runlog_path;
    result.final_weights = bstate.weights;
    result.steps = gstep;
    return result;
}

// ---------------- ablation ----------------

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string s = "mode,dice_mean,dice_std,map_mean,map_std\n";
    for (const auto& r : rows)
        s += r.mode + "," + fmt_g(r.dice_mean) + "," + fmt_g(r.dice_std) + "," + fmt_g(r.map_mean) + "," +
             fmt_g(r.map_std) + "\n";
    return s;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
    double n = static_cast<double>(v.size());
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace

std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::vector<BalancerMode>& modes, int64_t n_seeds) {
    if (modes.empty()) throw std::invalid_argument("ablate: need at least one mode");
    if (n_seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
    if (n_seeds < 2) std::cerr << "ablate: warning: fewer than 2 seeds, standard deviation is undefined\n";
    fs::create_directories(cfg.out_dir);

    std::string pair_log = "seed_index,seed,mode,dice,map50\n";
    std::vector<AblationRow> rows;
    std::vector<std::vector<double>> dices(modes.size()), maps(modes.size());
    for (int64_t s = 0; s < n_seeds; ++s) {
        uint64_t seed = cfg.seed + static_cast<uint64_t>(s);
        for (size_t m = 0; m < modes.size(); ++m) {
            TrainConfig run_cfg = cfg;
            run_cfg.balancer.mode = modes[m];
            run_cfg.seed = seed;  // matched pairs: same seed across modes
            run_cfg.out_dir =
                (fs::path(cfg.out_dir) / (to_string(modes[m]) + "_seed" + std::to_string(seed))).string();
            TrainResult r = train(run_cfg);
            dices[m].push_back(r.best_val.dice);
            maps[m].push_back(r.best_val.map50);
            pair_log += std::to_string(s) + "," + std::to_string(seed) + "," + to_string(modes[m]) + "," +
                        fmt_g(r.best_val.dice) + "," + fmt_g(r.best_val.map50) + "\n";
        }
    }
    for (size_t m = 0; m < modes.size(); ++m) {
        auto [dm, ds] = mean_std(dices[m]);
        auto [mm, ms] = mean_std(maps[m]);
        rows.push_back({to_string(modes[m]), dm, ds, mm, ms});
    }
    write_text_file((fs::path(cfg.out_dir) / "ablation.csv").string(), ablation_csv(rows));
    write_text_file((fs::path(cfg.out_dir) / "ablation_pairs.csv").string(), pair_log);
    return rows;
}

// ---------------- reconstruction ----------------

namespace {

// 3x5 glyphs for digits, row-major bitmasks
constexpr uint8_t kDigitFont[10][5] = {
    {0b111, 0b101, 0b101, 0b101, 0b111}, {0b010, 0b110, 0b010, 0b010, 0b111},
    {0b111, 0b001, 0b111, 0b100, 0b111}, {0b111, 0b001, 0b111, 0b001, 0b111},
    {0b101, 0b101, 0b111, 0b001, 0b001}, {0b111, 0b100, 0b111, 0b001, 0b111},
    {0b111, 0b100, 0b111, 0b101, 0b111}, {0b111, 0b001, 0b010, 0b010, 0b010},
    {0b111, 0b101, 0b111, 0b101, 0b111}, {0b111, 0b101, 0b111, 0b001, 0b111}};

struct Canvas {
    std::vector<uint8_t> rgb;
    int64_t h, w;
    void set(int64_t y, int64_t x, uint8_t r, uint8_t g, uint8_t b) {
        if (y < 0 || y >= h || x < 0 || x >= w) return;
        size_t i = static_cast<size_t>((y * w + x) * 3);
        rgb[i] = r;
        rgb[i + 1] = g;
        rgb[i + 2] = b;
    }
};

void draw_rect(Canvas& c, const Box& b, uint8_t r, uint8_t g, uint8_t bl) {
    int64_t x0 = static_cast<int64_t>(std::floor(b.x0)), x1 = static_cast<int64_t>(std::ceil(b.x1)) - 1;
    int64_t y0 = static_cast<int64_t>(std::floor(b.y0)), y1 = static_cast<int64_t>(std::ceil(b.y1)) - 1;
    for (int64_t x = x0; x <= x1; ++x) {
        c.set(y0, x, r, g, bl);
        c.set(y1, x, r, g, bl);
    }
    for (int64_t y = y0; y <= y1; ++y) {
        c.set(y, x0, r, g, bl);
        c.set(y, x1, r, g, bl);
    }
}

void draw_number(Canvas& c, int64_t y, int64_t x, int value, uint8_t r, uint8_t g, uint8_t b) {
    std::string s = std::to_string(value);
    for (size_t i = 0; i < s.size(); ++i) {
        int d = s[i] - '0';
        for (int row = 0; row < 5; ++row)
            for (int col = 0; col < 3; ++col)
                if (kDigitFont[d][row] & (1 << (2 - col)))
                    c.set(y + row, x + static_cast<int64_t>(i) * 4 + col, r, g, b);
    }
}

}  // namespace

ReconstructResult reconstruct(const Model& model, const Sample& sample, const std::string& out_stem,
                              const EvalOptions& opts) {
    int64_t ts = model.config().total_stride();
    if (sample.image.shape[1] % ts != 0 || sample.image.shape[2] % ts != 0)
        throw std::invalid_argument("reconstruct: image extents " + sample.image.shape_str() +
                                    " are not divisible by " + std::to_string(ts) +
                                    "; pad to the next multiple of " + std::to_string(ts));
    Tape t;
    auto fwd = model.forward(t, sample.image, false, nullptr);
    const Tensor& depth = t.val(fwd.depth);
    int64_t h = depth.shape[0], w = depth.shape[1];

    ReconstructResult res;
    res.depth_png = out_stem + "_depth.png";
    res.ply = out_stem + "_cloud.ply";
    res.overlay_png = out_stem + "_overlay.png";

    std::vector<uint16_t> depth16(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < depth.numel(); ++i) depth16[static_cast<size_t>(i)] = quantize_depth16(depth[i]);
    write_png_gray16(res.depth_png, depth16, h, w);

    Tensor pred_classes = argmax_classes(t.val(fwd.seg_logits));
    PointCloud cloud = backproject(depth, sample.image, &pred_classes, sample.intrinsics, sample.depth_scale_mm);
    write_ply(cloud, res.ply, PlyFormat::BinaryLittleEndian);

    Canvas canvas;
    canvas.h = h;
    canvas.w = w;
    canvas.rgb.resize(static_cast<size_t>(h * w * 3));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t ch = 0; ch < 3; ++ch) {
                double v = sample.image.at(ch, y, x);
                if (pred_classes.at(y, x) != 0.0) v = 0.5 * v + (ch == 1 ? 0.5 : 0.0);  // green mask tint
                canvas.rgb[static_cast<size_t>((y * w + x) * 3 + ch)] =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    auto dets = decode_detections(t.val(fwd.det), fwd.det_meta, opts.objectness_threshold, opts.nms_iou);
    for (const auto& d : dets) {
        draw_rect(canvas, d.box, 255, 255, 0);
        draw_number(canvas, static_cast<int64_t>(d.box.y0) + 2, static_cast<int64_t>(d.box.x0) + 2, d.box.cls, 255,
                    255, 0);
    }
    write_png_rgb8(res.overlay_png, canvas.rgb, h, w);
    res.detections = dets.size();
    return res;
}

// ---------------- gradient-check entry ----------------

double GradCheckReport::worst() const { return std::max(std::max(seg, depth), std::max(detection, end_to_end)); }

GradCheckReport run_gradcheck(uint64_t seed) {
    GradCheckReport rep;
    Rng rng(mix_seed(seed, 0x6C));

    {  // segmentation loss: multi-class CE + soft-IoU term
        ParamStore ps;
        Tensor logits({2, 6, 6});
        for (double& v : logits.data) v = rng.normal(0.0, 1.0);
        ps.add("logits", logits);
        Tensor target = Tensor::zeros({6, 6});
        for (double& v : target.data) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        SegLossConfig cfg;
        rep.seg = grad_check(
            [&](Tape& t, ParamStore& p) { return seg_loss(t, t.param(p, "logits"), target, cfg).value; }, ps, 1e-6);
    }
    {  // depth loss: SSIM + edge + MAE terms
        ParamStore ps;
        Tensor pred({8, 8});
        for (double& v : pred.data) v = rng.uniform(0.1, 0.9);
        ps.add("pred", pred);
        Tensor target({8, 8});
        for (double& v : target.data) v = rng.uniform(0.1, 0.9);
        DepthLossConfig cfg;
        rep.depth = grad_check(
            [&](Tape& t, ParamStore& p) { return depth_loss(t, t.param(p, "pred"), target, cfg).value; }, ps, 1e-6);
    }
    {  // detection loss: objectness + class CE + box regression
        DetGridMeta meta{4, 4, 4, 2};
        ParamStore ps;
        Tensor grid({meta.channels(), meta.grid_h, meta.grid_w});
        for (double& v : grid.data) v = rng.normal(0.0, 0.5);
        ps.add("grid", grid);
        std::vector<Box> boxes = {{1.0, 2.0, 9.0, 8.0, 1}, {8.0, 9.0, 15.0, 15.0, 2}};
        auto matches = match_targets(boxes, meta);
        rep.detection = grad_check(
            [&](Tape& t, ParamStore& p) {
                return detection_loss(t, t.param(p, "grid"), meta, matches, 2).value;
            },
            ps, 1e-6);
    }
    {  // full weighted loss through a reduced model, stochastic gates off
        ModelConfig mc;
        mc.stages = {{3, 2, 6, 1, 1}, {3, 2, 8, 1, 2}};
        mc.drop_path_max = 0.0;
        mc.decoder_dim = 8;
        mc.num_classes = 2;
        mc.det_classes = 1;
        Model model(mc, seed);
        Tensor image({3, 32, 32});
        for (double& v : image.data) v = rng.uniform(0.0, 1.0);
        Tensor mask = Tensor::zeros({32, 32});
        for (int64_t y = 8; y < 24; ++y)
            for (int64_t x = 6; x < 22; ++x) mask.at(y, x) = 1.0;
        Tensor dep({32, 32});
        for (double& v : dep.data) v = rng.uniform(0.2, 0.8);
        std::vector<Box> boxes = {{6.0, 8.0, 22.0, 24.0, 1}};
        TrainConfig tc;
        tc.model = mc;
        WeightVector w = WeightVector::uniform(3);
        rep.end_to_end = grad_check(
            [&](Tape& t, ParamStore&) {
                auto fwd = model.forward(t, image, false, nullptr);
                auto seg = seg_loss(t, fwd.seg_logits, mask, tc.seg_loss);
                auto dpt = depth_loss(t, fwd.depth, dep, tc.depth_loss);
                auto matches = match_targets(boxes, fwd.det_meta);
                auto det = detection_loss(t, fwd.det, fwd.det_meta, matches, 1);
                return total_loss(t, seg, dpt, det, w).total;
            },
            model.params(), 1e-5, 2, seed);
    }
    return rep;
}

// ---------------- svg plots ----------------

namespace {

std::string svg_polyline(const std::vector<double>& ys, double ymin, double ymax, size_t n, const char* color) {
    const double W = 760, H = 260, X0 = 30, Y0 = 10;
    std::string pts;
    for (size_t i = 0; i < ys.size(); ++i) {
        double x = X0 + (n > 1 ? W * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0);
        double fy = ymax > ymin ? (ys[i] - ymin) / (ymax - ymin) : 0.5;
        double y = Y0 + H * (1.0 - fy);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", x, y);
        pts += buf;
    }
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts +
           "\"/>\n";
}

void write_series_svg(const std::string& path, const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      double ymin, double ymax) {
    static const char* kColors[] = {"#d62728", "#1f77b4", "#2ca02c", "#222222"};
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"300\" viewBox=\"0 0 800 300\">\n"
        "<rect width=\"800\" height=\"300\" fill=\"white\"/>\n"
        "<line x1=\"30\" y1=\"270\" x2=\"790\" y2=\"270\" stroke=\"#888\"/>\n"
        "<line x1=\"30\" y1=\"10\" x2=\"30\" y2=\"270\" stroke=\"#888\"/>\n";
    size_t n = 0;
    for (const auto& [name, ys] : series) n = std::max(n, ys.size());
    for (size_t i = 0; i < series.size(); ++i) {
        svg += svg_polyline(series[i].second, ymin, ymax, n, kColors[i % 4]);
        svg += "<text x=\"" + std::to_string(40 + 120 * i) + "\" y=\"292\" fill=\"" + kColors[i % 4] +
               "\" font-size=\"12\" font-family=\"sans-serif\">" + series[i].first + "</text>\n";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g / %.4g", ymin, ymax);
    svg += "<text x=\"34\" y=\"22\" fill=\"#555\" font-size=\"10\" font-family=\"sans-serif\">y range " +
           std::string(buf) + "</text>\n</svg>\n";
    write_text_file(path, svg);
}

}  // namespace

void write_loss_svg(const RunLog& log, const std::string& path) {
    std::vector<std::pair<std::string, std::vector<double>>> series(4);
    series[0].first = "seg";
    series[1].first = "depth";
    series[2].first = "det";
    series[3].first = "total";
    double ymin = 0.0, ymax = 1e-9;
    for (const auto& r : log.rows) {
        series[0].second.push_back(r.loss_seg);
        series[1].second.push_back(r.loss_depth);
        series[2].second.push_back(r.loss_det);
        series[3].second.push_back(r.loss_total);
        ymax = std::max({ymax, r.loss_seg, r.loss_depth, r.loss_det, r.loss_total});
    }
    write_series_svg(path, series, ymin, ymax);
}

void write_weight_svg(const RunLog& log, const std::string& path) {
    std::vector<std::pair<std::string, std::vector<double>>> series(3);
    series[0].first = "w_seg";
    series[1].first = "w_depth";
    series[2].first = "w_det";
    for (const auto& r : log.rows) {
        series[0].second.push_back(r.w_seg);
        series[1].second.push_back(r.w_depth);
        series[2].second.push_back(r.w_det);
    }
    write_series_svg(path, series, 0.0, 1.0);
}

}  // namespace mtscene
