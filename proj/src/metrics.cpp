#include "mtscene/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace mtscene {

double dice(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("dice: mask extents differ: " + pred.shape_str() + " vs " + target.shape_str());
    int64_t inter = 0, a = 0, b = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        bool p = pred[i] != 0.0, t = target[i] != 0.0;
        inter += (p && t);
        a += p;
        b += t;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double miou_hard(const Tensor& pred_classes, const Tensor& target_classes, int64_t num_classes) {
    if (!pred_classes.same_shape(target_classes))
        throw std::invalid_argument("miou_hard: map extents differ");
    if (num_classes < 1) throw std::invalid_argument("miou_hard: num_classes must be positive");
    std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0), uni(static_cast<size_t>(num_classes), 0);
    for (int64_t i = 0; i < pred_classes.numel(); ++i) {
        int64_t p = static_cast<int64_t>(pred_classes[i]);
        int64_t t = static_cast<int64_t>(target_classes[i]);
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw std::invalid_argument("miou_hard: class index out of range");
        if (p == t) {
            inter[static_cast<size_t>(p)] += 1;
            uni[static_cast<size_t>(p)] += 1;
        } else {
            uni[static_cast<size_t>(p)] += 1;
            uni[static_cast<size_t>(t)] += 1;
        }
    }
    double sum = 0.0;
    int64_t counted = 0;
    for (int64_t c = 0; c < num_classes; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;  // absent from both maps
        sum += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni[static_cast<size_t>(c)]);
        counted += 1;
    }
    if (counted == 0) throw std::invalid_argument("miou_hard: no class present in either map");
    return sum / static_cast<double>(counted);
}

double depth_mae_mm(const Tensor& pred, const Tensor& target, double scale_mm) {
    if (!pred.same_shape(target)) throw std::invalid_argument("depth_mae_mm: extents differ");
    if (!(scale_mm > 0)) throw std::invalid_argument("depth_mae_mm: scale_mm must be positive");
    double s = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) s += std::abs(pred[i] - target[i]);
    return s / static_cast<double>(pred.numel()) * scale_mm;
}

double iou_box(const Box& a, const Box& b) {
    if (a.x1 <= a.x0 || a.y1 <= a.y0 || b.x1 <= b.x0 || b.y1 <= b.y0)
        throw std::invalid_argument("iou_box: degenerate box");
    double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (ix <= 0 || iy <= 0) return 0.0;
    double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

namespace {

// all-point interpolation: integrate the precision envelope over recall.
// tp holds 0/1 flags in descending score order.
double ap_from_matches(const std::vector<int>& tp, int64_t n_gt) {
    std::vector<double> prec(tp.size()), rec(tp.size());
    int64_t cum = 0;
    for (size_t d = 0; d < tp.size(); ++d) {
        cum += tp[d];
        prec[d] = static_cast<double>(cum) / static_cast<double>(d + 1);
        rec[d] = static_cast<double>(cum) / static_cast<double>(n_gt);
    }
    double ap = 0.0, env = 0.0;
    for (size_t i = tp.size(); i-- > 0;) {
        env = std::max(env, prec[i]);
        double r_lo = i > 0 ? rec[i - 1] : 0.0;
        if (rec[i] > r_lo) ap += (rec[i] - r_lo) * env;
    }
    return ap;
}

}  // namespace

double average_precision(std::vector<Detection> detections, const std::vector<Box>& ground_truth,
                         double iou_threshold) {
    if (!(iou_threshold > 0 && iou_threshold < 1))
        throw std::invalid_argument("average_precision: iou_threshold must be in (0,1)");
    if (ground_truth.empty()) return 0.0;
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(ground_truth.size(), false);
    std::vector<int> tp(detections.size(), 0);
    for (size_t d = 0; d < detections.size(); ++d) {
        double best = 0.0;
        int64_t best_g = -1;
        for (size_t g = 0; g < ground_truth.size(); ++g) {
            if (used[g]) continue;
            double v = iou_box(detections[d].box, ground_truth[g]);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_g = static_cast<int64_t>(g);
            }
        }
        if (best_g >= 0) {
            used[static_cast<size_t>(best_g)] = true;
            tp[d] = 1;
        }
    }
    return ap_from_matches(tp, static_cast<int64_t>(ground_truth.size()));
}

std::map<int, double> dataset_average_precision(const std::vector<std::vector<Detection>>& detections,
                                                const std::vector<std::vector<Box>>& ground_truth,
                                                double iou_threshold) {
    if (detections.size() != ground_truth.size())
        throw std::invalid_argument("dataset_average_precision: image counts differ");
    if (!(iou_threshold > 0 && iou_threshold < 1))
        throw std::invalid_argument("dataset_average_precision: iou_threshold must be in (0,1)");
    std::map<int, int64_t> gt_count;
    for (const auto& boxes : ground_truth)
        for (const auto& b : boxes) gt_count[b.cls] += 1;

    std::map<int, double> ap;
    for (const auto& [cls, n_gt] : gt_count) {
        struct Ref {
            double score;
            size_t img;
            const Detection* det;
        };
        std::vector<Ref> refs;
        for (size_t i = 0; i < detections.size(); ++i)
            for (const auto& d : detections[i])
                if (d.box.cls == cls) refs.push_back({d.score, i, &d});
        std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

        std::vector<std::vector<bool>> used(ground_truth.size());
        for (size_t i = 0; i < ground_truth.size(); ++i) used[i].assign(ground_truth[i].size(), false);
        std::vector<int> tp(refs.size(), 0);
        for (size_t d = 0; d < refs.size(); ++d) {
            const auto& gts = ground_truth[refs[d].img];
            double best = 0.0;
            int64_t best_g = -1;
            for (size_t g = 0; g < gts.size(); ++g) {
                if (gts[g].cls != cls || used[refs[d].img][g]) continue;
                double v = iou_box(refs[d].det->box, gts[g]);
                if (v >= iou_threshold && v > best) {
                    best = v;
                    best_g = static_cast<int64_t>(g);
                }
            }
            if (best_g >= 0) {
                used[refs[d].img][static_cast<size_t>(best_g)] = true;
                tp[d] = 1;
            }
        }
        ap[cls] = ap_from_matches(tp, n_gt);
    }
    return ap;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["dice"] = dice;
    j["miou"] = miou;
    j["map50"] = map50;
    j["depth_mae_mm"] = depth_mae_mm;
    j["images"] = images;
    j["instances"] = instances;
    nlohmann::json ap = nlohmann::json::object();
    for (const auto& [cls, v] : per_class_ap) ap[std::to_string(cls)] = v;
    j["per_class_ap"] = ap;
    return j.dump(2);
}

std::string EvalReport::csv_header() { return "run,dice,miou,map50,depth_mae_mm,images,instances"; }

std::string EvalReport::csv_row(const std::string& run_label) const {
    std::ostringstream os;
    os.precision(9);
    os << run_label << "," << dice << "," << miou << "," << map50 << "," << depth_mae_mm << "," << images << ","
       << instances;
    return os.str();
}

}  // namespace mtscene
