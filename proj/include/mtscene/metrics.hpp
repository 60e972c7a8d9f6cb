#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtscene/boxes.hpp"
#include "mtscene/tensor.hpp"

namespace mtscene {

// 2|A n B| / (|A| + |B|) on 0/1 masks; 1.0 when both masks are empty.
double dice(const Tensor& pred, const Tensor& target);

// Hard mean-IoU over classes; classes absent from both maps are excluded.
double miou_hard(const Tensor& pred_classes, const Tensor& target_classes, int64_t num_classes);

// mean |pred - target| * scale_mm on normalized depth maps
double depth_mae_mm(const Tensor& pred, const Tensor& target, double scale_mm);

// intersection area / union area; 0 when disjoint
double iou_box(const Box& a, const Box& b);

// All-point interpolated AP with greedy score-ordered matching; each ground
// truth is matched at most once, at IoU >= iou_threshold.
double average_precision(std::vector<Detection> detections, const std::vector<Box>& ground_truth,
                         double iou_threshold);

// Per-class AP over a whole split: matching is per image, the precision-recall
// curve is pooled across images. Keys are the classes present in ground truth.
std::map<int, double> dataset_average_precision(const std::vector<std::vector<Detection>>& detections,
                                                const std::vector<std::vector<Box>>& ground_truth,
                                                double iou_threshold);

struct EvalReport {
    double dice = 0;
    double miou = 0;
    double map50 = 0;
    std::map<int, double> per_class_ap;
    double depth_mae_mm = 0;
    int64_t images = 0;
    int64_t instances = 0;

    std::string to_json() const;
    static std::string csv_header();
    std::string csv_row(const std::string& run_label) const;
};

}  // namespace mtscene
