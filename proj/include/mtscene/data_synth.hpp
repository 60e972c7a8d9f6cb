#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtscene/boxes.hpp"
#include "mtscene/recon3d.hpp"
#include "mtscene/tensor.hpp"

namespace mtscene {

// One training example with exact ground truth.
struct Sample {
    Tensor image;  // [3,H,W], values in [0,1]
    Tensor mask;   // [H,W], 0 = background, 1..C-1 = instrument classes
    Tensor depth;  // [H,W], normalized to [0,1]
    std::vector<Box> boxes;
    Intrinsics intrinsics;
    double depth_scale_mm = 150.0;
    bool has_annotations = true;  // false for imported pseudo-depth without mask/boxes

    int64_t height() const { return depth.shape[0]; }
    int64_t width() const { return depth.shape[1]; }
    void validate() const;
};

struct SceneConfig {
    int64_t image_size = 64;
    int64_t num_classes = 2;  // background + up to 7 instrument classes
    int64_t min_instruments = 1;
    int64_t max_instruments = 2;
    double tube_width_min = 9.0;
    double tube_width_max = 15.0;
    double tube_length_min = 22.0;
    double tube_length_max = 44.0;
    int64_t background_octaves = 3;
    double background_depth_min = 0.55;
    double background_depth_max = 0.95;
    double instrument_depth_min = 0.15;
    double instrument_depth_max = 0.50;
    double noise_level = 0.02;
    uint64_t seed = 0;  // folded into every per-sample seed

    void validate() const;
};

// Deterministic in (seed, cfg): tube-shaped instruments with linearly varying
// depth over a textured background with a smooth depth field.
Sample generate_scene(uint64_t seed, const SceneConfig& cfg);

// image: 8-bit RGB PNG; mask: 8-bit indexed PNG; depth: 16-bit grayscale PNG
// (v -> v/65535); boxes/intrinsics/scale in a JSON sidecar per sample.
void write_sample(const Sample& sample, const std::string& directory, int64_t index);
Sample read_sample(const std::string& directory, int64_t index);

// round-half-up quantization used for the 16-bit depth channel
uint16_t quantize_depth16(double v);

struct Dataset {
    std::vector<Sample> samples;
};

struct DatasetSplits {
    std::vector<int64_t> train, val, test;
};

// Generates n samples (per-sample seed derived from base_seed and index),
// writes them plus manifest.json with split membership and global metadata.
void write_dataset(const std::string& directory, const SceneConfig& cfg, uint64_t base_seed, int64_t n_train,
                   int64_t n_val, int64_t n_test);

Dataset load_split(const std::string& directory, const std::string& split);

// Pairs every image in image_dir with the 16-bit depth PNG of the same
// filename stem in depth_dir; mask/boxes are zero-filled and flagged.
Dataset import_pseudo_depth(const std::string& image_dir, const std::string& depth_dir);

nlohmann::json to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const nlohmann::json& j);

}  // namespace mtscene
