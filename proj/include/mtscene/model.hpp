#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtscene/boxes.hpp"
#include "mtscene/losses.hpp"
#include "mtscene/rng.hpp"
#include "mtscene/tape.hpp"

namespace mtscene {

struct StageConfig {
    int64_t patch_size = 3;
    int64_t stride = 2;  // overlap when stride < patch_size
    int64_t embed_dim = 32;
    int64_t depth = 2;
    int64_t num_heads = 1;
};

struct ModelConfig {
    std::vector<StageConfig> stages = {{7, 4, 16, 2, 1}, {3, 2, 32, 2, 2}, {3, 2, 64, 2, 4}};
    double drop_path_max = 0.1;
    int64_t decoder_dim = 64;
    int64_t mlp_ratio = 2;
    int64_t num_classes = 2;  // segmentation classes including background
    int64_t det_classes = 1;  // instrument classes for the detection head

    int64_t total_stride() const;
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Staged attention encoder with overlap patch merging and stochastic depth,
// decoder fusing all stages at quarter resolution, three task heads.
class Model {
public:
    Model(ModelConfig cfg, uint64_t init_seed);

    struct Forward {
        std::vector<int> stage_features;  // [D_i, h_i, w_i] nodes
        int fused = -1;                   // [decoder_dim, H/4, W/4]
        int seg_logits = -1;              // [C, H, W]
        int depth = -1;                   // [H, W], in (0,1)
        int det = -1;                     // [5 + det_classes, H/4, W/4]
        DetGridMeta det_meta;
    };

    // training=true samples drop-path gates from rng (one per residual branch)
    std::vector<int> encoder_forward(Tape& t, const Tensor& image, bool training = false,
                                     Rng* drop_rng = nullptr) const;
    int decoder_forward(Tape& t, const std::vector<int>& features, int64_t out_h, int64_t out_w) const;
    Forward heads_forward(Tape& t, int fused, int64_t image_h, int64_t image_w) const;
    Forward forward(Tape& t, const Tensor& image, bool training = false, Rng* drop_rng = nullptr) const;

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // parameter ids shared between all task heads (encoder + decoder)
    std::vector<int> shared_param_ids() const;

private:
    ModelConfig cfg_;
    ParamStore params_;

    void build_params(uint64_t init_seed);
};

// Each ground-truth box is assigned to the grid cell containing its center
// (half-open intervals); ties resolved by larger area.
std::vector<MatchedCell> match_targets(const std::vector<Box>& boxes, const DetGridMeta& meta);

// Cells with objectness above threshold, decoded and filtered by per-class
// greedy NMS; detection classes are reported 1-based to match ground truth.
std::vector<Detection> decode_detections(const Tensor& det_grid, const DetGridMeta& meta,
                                         double objectness_threshold, double nms_iou);

// Checkpoint: "MTSC" magic, version, config JSON, named parameter manifest
// with shapes, then little-endian float32 arrays in manifest order.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace mtscene
