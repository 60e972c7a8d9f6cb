#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtscene/boxes.hpp"
#include "mtscene/tape.hpp"

namespace mtscene {

struct SegLossConfig {
    double alpha = 0.5;         // weight on CE / BCE
    double beta = 0.5;          // weight on 1 - soft mIoU
    int64_t num_classes = 2;
    bool binary_mode = false;
    void validate() const;
};

struct DepthLossConfig {
    double w_ssim = 0.5;
    double w_edge = 0.25;
    double w_mae = 0.25;
    int64_t ssim_window = 7;
    double ssim_c1 = 1e-4;   // (0.01)^2, dynamic range 1
    double ssim_c2 = 9e-4;   // (0.03)^2
    void validate() const;
};

// Per-task loss weights, simplex-constrained.
struct WeightVector {
    std::vector<double> w;
    WeightVector() = default;
    explicit WeightVector(std::vector<double> v) : w(std::move(v)) {}
    static WeightVector uniform(int t);
    void validate(double tol = 1e-9) const;
};

struct LossBreakdown {
    double total = 0, seg = 0, depth = 0, detection = 0;
    std::map<std::string, double> components;
};

// A scalar loss node plus named sub-term nodes, all on the same tape.
struct LossNode {
    int value = -1;
    std::map<std::string, int> components;
};

// Detection grid layout: channel 0 = objectness logit, 1..4 = raw box
// offsets (pixels after stride * exp activation), 5.. = class logits.
struct DetGridMeta {
    int64_t grid_h = 0, grid_w = 0;
    int64_t stride = 4;
    int64_t num_classes = 1;  // instrument classes (no background channel)
    int64_t channels() const { return 5 + num_classes; }
};

// Ground-truth box assigned to a grid cell; regression target is the
// (left, top, right, bottom) distance from the cell center to the box edges.
struct MatchedCell {
    int64_t cy = 0, cx = 0;
    int cls = 0;  // 0-based detection class
    double ltrb[4] = {0, 0, 0, 0};
};

// ---- differentiable losses (build nodes on the tape) ----

// logits: [C,H,W] node (or [1,H,W] in binary mode); target: class-index map
// [H,W] (or 0/1 map in binary mode). Components: "ce_or_bce", "miou_term".
LossNode seg_loss(Tape& t, int logits, const Tensor& target, const SegLossConfig& cfg);

// mean local SSIM over sliding windows of two [H,W] nodes; scalar node in [-1,1]
int ssim_node(Tape& t, int a, int b, const DepthLossConfig& cfg);

// mean |sobel_mag(pred) - sobel_mag(target)| over the valid region of [H,W] nodes
int sobel_edge_node(Tape& t, int pred, int target);

// pred: [H,W] node; target: [H,W] tensor. Components: "ssim" (the 1-SSIM
// term), "edge", "mae".
LossNode depth_loss(Tape& t, int pred, const Tensor& target, const DepthLossConfig& cfg);

// det: [channels, grid_h, grid_w] node. num_gt is the number of ground-truth
// boxes the matcher saw (zero matches with num_gt > 0 is an error).
// Components: "smooth_l1", "det_ce".
LossNode detection_loss(Tape& t, int det, const DetGridMeta& meta,
                        const std::vector<MatchedCell>& matches, int64_t num_gt);

struct TotalLossNodes {
    int total = -1;
    LossNode seg, depth, detection;
    WeightVector weights;
};

TotalLossNodes total_loss(Tape& t, const LossNode& seg, const LossNode& depth,
                          const LossNode& detection, const WeightVector& weights);

// Read scalar values out of the tape; verifies the Eq-(1) sum within 1e-9
// and that every component is finite.
LossBreakdown read_breakdown(const Tape& t, const TotalLossNodes& nodes);

// plain scalar helper (box regression residual -> loss value)
double smooth_l1_value(double x);

}  // namespace mtscene
