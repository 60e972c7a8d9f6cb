// Python bindings for the main operations: losses, task-weight balancing,
// metrics, scene synthesis, and depth back-projection.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtscene/balancer.hpp"
#include "mtscene/data_synth.hpp"
#include "mtscene/harness.hpp"
#include "mtscene/losses.hpp"
#include "mtscene/metrics.hpp"
#include "mtscene/recon3d.hpp"

namespace py = pybind11;
using namespace mtscene;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int64_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
    Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> a(shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

Box box_from_tuple(const std::tuple<double, double, double, double, int>& b) {
    return {std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<3>(b), std::get<4>(b)};
}

}  // namespace

PYBIND11_MODULE(_mtscene, m) {
    m.doc() = "multi-task scene understanding toolkit (core operations)";

    // ---- balancer ----
    m.def(
        "awu_step",
        [](std::vector<double> weights, std::vector<double> losses, double eta, bool amplify_high_loss) {
            BalancerConfig cfg;
            cfg.eta = eta;
            cfg.sign = amplify_high_loss ? BalancerSign::AmplifyHighLoss : BalancerSign::AsWritten;
            return awu_step(WeightVector(std::move(weights)), losses, cfg).w;
        },
        py::arg("weights"), py::arg("losses"), py::arg("eta") = 0.1, py::arg("amplify_high_loss") = false,
        "One multiplicative task-weight update; returns simplex-normalized weights.");

    m.def(
        "optimal_weights",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& grads, double lambda_reg) {
            if (grads.ndim() != 2) throw std::invalid_argument("optimal_weights: expected a 2-D gradient matrix");
            TaskGradients g(grads.shape(0), grads.shape(1));
            std::copy(grads.data(), grads.data() + grads.size(), g.data.begin());
            BalancerConfig cfg;
            cfg.lambda_reg = lambda_reg;
            return optimal_weights(g, cfg).w;
        },
        py::arg("task_gradients"), py::arg("lambda_reg") = 1e-3,
        "Solve (G G^T + lambda I) w = 1 and project onto the simplex.");

    // ---- losses (scalar values) ----
    m.def(
        "seg_loss",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& target, double alpha, double beta) {
            Tape t;
            SegLossConfig cfg;
            cfg.alpha = alpha;
            cfg.beta = beta;
            Tensor lt = tensor_from_array(logits);
            cfg.num_classes = lt.shape[0];
            int node = seg_loss(t, t.leaf(lt), tensor_from_array(target), cfg).value;
            return t.scalar(node);
        },
        py::arg("logits"), py::arg("target"), py::arg("alpha") = 0.5, py::arg("beta") = 0.5,
        "Weighted cross-entropy + (1 - soft mIoU) on a [C,H,W] logit map.");

    m.def(
        "depth_loss",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& target) {
            Tape t;
            DepthLossConfig cfg;
            int node = depth_loss(t, t.leaf(tensor_from_array(pred)), tensor_from_array(target), cfg).value;
            return t.scalar(node);
        },
        py::arg("pred"), py::arg("target"), "SSIM + edge + MAE depth loss on [H,W] maps.");

    // ---- metrics ----
    m.def(
        "dice",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
            return dice(tensor_from_array(a), tensor_from_array(b));
        },
        py::arg("pred"), py::arg("target"));

    m.def(
        "iou_box",
        [](std::tuple<double, double, double, double, int> a, std::tuple<double, double, double, double, int> b) {
            return iou_box(box_from_tuple(a), box_from_tuple(b));
        },
        py::arg("a"), py::arg("b"), "IoU of two (x0,y0,x1,y1,cls) boxes.");

    m.def(
        "average_precision",
        [](const std::vector<std::tuple<double, double, double, double, int, double>>& detections,
           const std::vector<std::tuple<double, double, double, double, int>>& ground_truth, double iou_threshold) {
            std::vector<Detection> dets;
            for (const auto& d : detections)
                dets.push_back({{std::get<0>(d), std::get<1>(d), std::get<2>(d), std::get<3>(d), std::get<4>(d)},
                                std::get<5>(d)});
            std::vector<Box> gts;
            for (const auto& g : ground_truth) gts.push_back(box_from_tuple(g));
            return average_precision(dets, gts, iou_threshold);
        },
        py::arg("detections"), py::arg("ground_truth"), py::arg("iou_threshold") = 0.5,
        "All-point interpolated AP; detections are (x0,y0,x1,y1,cls,score).");

    // ---- synthesis ----
    m.def(
        "generate_scene",
        [](uint64_t seed, int64_t image_size) {
            SceneConfig cfg;
            cfg.image_size = image_size;
            Sample s = generate_scene(seed, cfg);
            py::dict d;
            d["image"] = array_from_tensor(s.image);
            d["mask"] = array_from_tensor(s.mask);
            d["depth"] = array_from_tensor(s.depth);
            py::list boxes;
            for (const auto& b : s.boxes) boxes.append(py::make_tuple(b.x0, b.y0, b.x1, b.y1, b.cls));
            d["boxes"] = boxes;
            d["depth_scale_mm"] = s.depth_scale_mm;
            d["intrinsics"] = py::make_tuple(s.intrinsics.fx, s.intrinsics.fy, s.intrinsics.cx, s.intrinsics.cy);
            return d;
        },
        py::arg("seed"), py::arg("image_size") = 64, "Deterministic synthetic sample with exact ground truth.");

    // ---- reconstruction ----
    m.def(
        "backproject",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& depth,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& rgb,
           std::tuple<double, double, double, double> intrinsics, double scale_mm) {
            Intrinsics k{std::get<0>(intrinsics), std::get<1>(intrinsics), std::get<2>(intrinsics),
                         std::get<3>(intrinsics)};
            PointCloud c = backproject(tensor_from_array(depth), tensor_from_array(rgb), nullptr, k, scale_mm);
            py::array_t<float> pts({static_cast<py::ssize_t>(c.size()), static_cast<py::ssize_t>(3)});
            auto r = pts.mutable_unchecked<2>();
            for (size_t i = 0; i < c.size(); ++i)
                for (int j = 0; j < 3; ++j) r(static_cast<py::ssize_t>(i), j) = c.points[i][static_cast<size_t>(j)];
            return pts;
        },
        py::arg("depth"), py::arg("rgb"), py::arg("intrinsics"), py::arg("scale_mm") = 150.0,
        "Pinhole back-projection of a normalized depth map; returns N x 3 points in mm.");

    // ---- verification ----
    m.def(
        "gradcheck",
        [](uint64_t seed) {
            GradCheckReport r = run_gradcheck(seed);
            py::dict d;
            d["seg"] = r.seg;
            d["depth"] = r.depth;
            d["detection"] = r.detection;
            d["end_to_end"] = r.end_to_end;
            return d;
        },
        py::arg("seed") = 7, "Max relative finite-difference error per loss head and end to end.");
}
