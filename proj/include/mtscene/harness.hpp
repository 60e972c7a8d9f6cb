#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtscene/balancer.hpp"
#include "mtscene/data_synth.hpp"
#include "mtscene/losses.hpp"
#include "mtscene/metrics.hpp"
#include "mtscene/model.hpp"

namespace mtscene {

struct OptimizerConfig {
    std::string kind = "adamw";  // adaptive moments with decoupled weight decay
    double learning_rate = 0.001;
    double weight_decay = 0.02;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    void validate() const;
};

// Exponential decay is applied once per epoch; the plateau factor multiplies
// in when validation total loss fails to improve for `patience` epochs.
struct SchedulerConfig {
    double exp_gamma = 0.96;
    double plateau_factor = 0.5;
    int64_t plateau_patience = 5;
    void validate() const;
};

struct TrainConfig {
    std::string dataset_dir;
    std::string out_dir = "run";
    ModelConfig model;
    SceneConfig scene;  // used by `synth` and recorded in config.json
    SegLossConfig seg_loss;
    DepthLossConfig depth_loss;
    BalancerConfig balancer;
    OptimizerConfig optimizer;
    SchedulerConfig schedulers;
    int64_t epochs = 30;
    int64_t batch_size = 8;
    uint64_t seed = 0;
    double objectness_threshold = 0.25;
    double nms_iou = 0.5;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);  // JSON file, missing keys take defaults

// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
public:
    AdamW(ParamStore& params, OptimizerConfig cfg);
    void step(double lr);  // consumes accumulated gradients

private:
    ParamStore& params_;
    OptimizerConfig cfg_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

struct RunLogRow {
    int64_t step = 0, epoch = 0;
    double lr = 0;
    double loss_seg = 0, loss_depth = 0, loss_det = 0, loss_total = 0;
    double w_seg = 0, w_depth = 0, w_det = 0;
};

struct RunLog {
    std::vector<RunLogRow> rows;
    void append(const RunLogRow& r);  // enforces strictly increasing step + simplex weights
    std::string to_csv() const;
    void write(const std::string& path) const;
};

struct TrainResult {
    std::string checkpoint_path;  // best-validation checkpoint
    std::string runlog_path;
    EvalReport best_val;
    EvalReport final_val;
    WeightVector final_weights;
    int64_t steps = 0;
};

TrainResult train(const TrainConfig& cfg);

struct EvalOptions {
    double objectness_threshold = 0.25;
    double nms_iou = 0.5;
    double map_iou = 0.5;
};

EvalReport evaluate(const Model& model, const Dataset& data, const EvalOptions& opts);
EvalReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& dataset_dir,
                               const std::string& split, const EvalOptions& opts);

struct AblationRow {
    std::string mode;
    double dice_mean = 0, dice_std = 0, map_mean = 0, map_std = 0;
};

// Matched-seed comparison of balancer modes; per-pair seeds are identical
// across modes. Writes ablation.csv (+ per-run logs) under cfg.out_dir.
std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::vector<BalancerMode>& modes, int64_t n_seeds);
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct ReconstructResult {
    std::string depth_png, ply, overlay_png;
    size_t detections = 0;
};

// Runs the model on one sample and writes a 16-bit depth PNG, a labeled
// colored point cloud, and an overlay image with mask tint + boxes + labels.
ReconstructResult reconstruct(const Model& model, const Sample& sample, const std::string& out_stem,
                              const EvalOptions& opts);

struct GradCheckReport {
    double seg = 0, depth = 0, detection = 0, end_to_end = 0;
    double worst() const;
};

// Central-difference checks of each loss head and of the full weighted loss
// through a reduced model (stochastic gates off).
GradCheckReport run_gradcheck(uint64_t seed = 7);

// Simple line plots of per-task losses and task weights over steps.
void write_loss_svg(const RunLog& log, const std::string& path);
void write_weight_svg(const RunLog& log, const std::string& path);

}  // namespace mtscene
