#include "mtscene/losses.hpp"

#include <cmath>

namespace mtscene {

namespace {

constexpr double kSoftIouEps = 1e-6;   // keeps absent-class ratios near 1 instead of 0/0
constexpr double kEdgeMagEps = 1e-12;  // under the sqrt of the Sobel magnitude

void check_finite(const Tensor& t, const char* what) {
    for (double v : t.data)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite value");
}

// stable elementwise BCE from logits z and 0/1 targets y:
// bce_i = softplus(-z_i) + z_i * (1 - y_i)
int bce_from_logits(Tape& t, int z, int one_minus_y) {
    int sp = t.softplus_(t.mul_scalar(z, -1.0));
    return t.mean_all(t.add(sp, t.mul(z, one_minus_y)));
}

}  // namespace

void SegLossConfig::validate() const {
    if (alpha < 0 || beta < 0 || alpha + beta <= 0)
        throw std::invalid_argument("SegLossConfig: need alpha >= 0, beta >= 0, alpha + beta > 0");
    if (num_classes < (binary_mode ? 2 : 2))
        throw std::invalid_argument("SegLossConfig: num_classes must be at least 2");
}

void DepthLossConfig::validate() const {
    if (w_ssim < 0 || w_edge < 0 || w_mae < 0)
        throw std::invalid_argument("DepthLossConfig: component weights must be non-negative");
    if (ssim_window < 1 || ssim_window % 2 == 0)
        throw std::invalid_argument("DepthLossConfig: ssim_window must be an odd positive integer");
}

WeightVector WeightVector::uniform(int t) {
    WeightVector v;
    v.w.assign(static_cast<size_t>(t), 1.0 / static_cast<double>(t));
    return v;
}

void WeightVector::validate(double tol) const {
    if (w.empty()) throw std::invalid_argument("WeightVector: empty");
    double s = 0.0;
    for (double x : w) {
        if (!(x > 0)) throw std::invalid_argument("WeightVector: entries must be positive");
        s += x;
    }
    if (std::abs(s - 1.0) > tol)
        throw std::invalid_argument("WeightVector: entries must sum to 1, got " + std::to_string(s));
}

LossNode seg_loss(Tape& t, int logits, const Tensor& target, const SegLossConfig& cfg) {
    cfg.validate();
    const Tensor& L = t.val(logits);
    if (L.ndim() != 3) throw std::invalid_argument("seg_loss: logits must be [C,H,W], got " + L.shape_str());
    int64_t c = L.shape[0], h = L.shape[1], w = L.shape[2], n = h * w;
    if (target.ndim() != 2 || target.shape[0] != h || target.shape[1] != w)
        throw std::invalid_argument("seg_loss: target extents " + target.shape_str() + " do not match logits " +
                                    L.shape_str());
    check_finite(target, "seg_loss target");

    LossNode out;
    int ce, miou;
    if (cfg.binary_mode) {
        if (c != 1) throw std::invalid_argument("seg_loss: binary mode expects a single logit channel");
        for (double v : target.data)
            if (v != 0.0 && v != 1.0) throw std::invalid_argument("seg_loss: binary target must be 0/1");
        int z = t.reshape(logits, {n, 1});
        Tensor y({n, 1}, target.data);
        Tensor omy({n, 1});
        for (int64_t i = 0; i < n; ++i) omy[i] = 1.0 - y[i];
        int yid = t.leaf(y, "seg_target");
        int omyid = t.leaf(std::move(omy));
        ce = bce_from_logits(t, z, omyid);

        int p = t.sigmoid_(z);
        int py = t.mul(p, yid);
        // foreground IoU
        int inter_f = t.sum_all(py);
        int uni_f = t.sum_all(t.sub(t.add(p, yid), py));
        int iou_f = t.div(t.add_scalar(inter_f, kSoftIouEps), t.add_scalar(uni_f, kSoftIouEps));
        // background IoU on complements
        int q = t.add_scalar(t.mul_scalar(p, -1.0), 1.0);
        int qy = t.mul(q, omyid);
        int inter_b = t.sum_all(qy);
        int uni_b = t.sum_all(t.sub(t.add(q, omyid), qy));
        int iou_b = t.div(t.add_scalar(inter_b, kSoftIouEps), t.add_scalar(uni_b, kSoftIouEps));
        miou = t.mul_scalar(t.add(iou_f, iou_b), 0.5);
    } else {
        if (c != cfg.num_classes)
            throw std::invalid_argument("seg_loss: logit channels " + std::to_string(c) +
                                        " != num_classes " + std::to_string(cfg.num_classes));
        Tensor onehot({n, c});
        for (int64_t i = 0; i < n; ++i) {
            double tv = target.data[static_cast<size_t>(i)];
            int64_t k = static_cast<int64_t>(tv);
            if (tv != static_cast<double>(k) || k < 0 || k >= c)
                throw std::invalid_argument("seg_loss: target class " + std::to_string(tv) +
                                            " out of range [0," + std::to_string(c) + ")");
            onehot.at(i, k) = 1.0;
        }
        int rows = t.transpose(t.reshape(logits, {c, n}));  // [N,C]
        int oh = t.leaf(std::move(onehot), "seg_onehot");
        int logp = t.log_softmax_rows(rows);
        ce = t.mul_scalar(t.sum_all(t.mul(oh, logp)), -1.0 / static_cast<double>(n));

        int p = t.softmax_rows(rows);
        int pt = t.mul(p, oh);
        int inter = t.col_sum(pt);                                // [C]
        int uni = t.col_sum(t.sub(t.add(p, oh), pt));             // [C]
        int iou = t.div(t.add_scalar(inter, kSoftIouEps), t.add_scalar(uni, kSoftIouEps));
        miou = t.mean_all(iou);
    }

    int miou_term = t.add_scalar(t.mul_scalar(miou, -1.0), 1.0);  // 1 - mIoU
    out.components["ce_or_bce"] = ce;
    out.components["miou_term"] = miou_term;
    out.value = t.add(t.mul_scalar(ce, cfg.alpha), t.mul_scalar(miou_term, cfg.beta));
    return out;
}

int ssim_node(Tape& t, int a, int b, const DepthLossConfig& cfg) {
    cfg.validate();
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    if (A.ndim() != 2 || !A.same_shape(B))
        throw std::invalid_argument("ssim: expected matching [H,W] inputs, got " + A.shape_str() + " and " +
                                    B.shape_str());
    int64_t k = cfg.ssim_window;
    if (k > A.shape[0] || k > A.shape[1])
        throw std::invalid_argument("ssim: window " + std::to_string(k) + " larger than map " + A.shape_str());
    int64_t h = A.shape[0], w = A.shape[1];
    int am = t.reshape(a, {1, h, w});
    int bm = t.reshape(b, {1, h, w});
    auto box = [&](int x) { return t.avg_pool(x, k, 1); };
    int mu_a = box(am), mu_b = box(bm);
    int mu_aa = t.mul(mu_a, mu_a), mu_bb = t.mul(mu_b, mu_b), mu_ab = t.mul(mu_a, mu_b);
    int var_a = t.sub(box(t.mul(am, am)), mu_aa);
    int var_b = t.sub(box(t.mul(bm, bm)), mu_bb);
    int cov = t.sub(box(t.mul(am, bm)), mu_ab);
    int num = t.mul(t.add_scalar(t.mul_scalar(mu_ab, 2.0), cfg.ssim_c1),
                    t.add_scalar(t.mul_scalar(cov, 2.0), cfg.ssim_c2));
    int den = t.mul(t.add_scalar(t.add(mu_aa, mu_bb), cfg.ssim_c1),
                    t.add_scalar(t.add(var_a, var_b), cfg.ssim_c2));
    return t.mean_all(t.div(num, den));
}

int sobel_edge_node(Tape& t, int pred, int target) {
    const Tensor& P = t.val(pred);
    const Tensor& T = t.val(target);
    if (P.ndim() != 2 || !P.same_shape(T))
        throw std::invalid_argument("sobel_edge_loss: expected matching [H,W] inputs, got " + P.shape_str() +
                                    " and " + T.shape_str());
    if (P.shape[0] < 3 || P.shape[1] < 3)
        throw std::invalid_argument("sobel_edge_loss: extents must be at least 3x3, got " + P.shape_str());
    int64_t h = P.shape[0], w = P.shape[1];
    Tensor kx({1, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
    Tensor ky({1, 1, 3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
    int kxid = t.leaf(kx, "sobel_x");
    int kyid = t.leaf(ky, "sobel_y");
    auto magnitude = [&](int img) {
        int m = t.reshape(img, {1, h, w});
        int gx = t.conv2d(m, kxid, -1, 1, 0);
        int gy = t.conv2d(m, kyid, -1, 1, 0);
        int sq = t.add_scalar(t.add(t.mul(gx, gx), t.mul(gy, gy)), kEdgeMagEps);
        return t.exp_(t.mul_scalar(t.log_(sq), 0.5));  // sqrt
    };
    int diff = t.sub(magnitude(pred), magnitude(target));
    return t.mean_all(t.abs_smooth(diff));
}

LossNode depth_loss(Tape& t, int pred, const Tensor& target, const DepthLossConfig& cfg) {
    cfg.validate();
    const Tensor& P = t.val(pred);
    if (P.ndim() != 2 || !P.same_shape(target))
        throw std::invalid_argument("depth_loss: pred " + P.shape_str() + " vs target " + target.shape_str());
    check_finite(P, "depth_loss pred");
    check_finite(target, "depth_loss target");
    int tgt = t.leaf(target, "depth_target");
    int ssim_term = t.add_scalar(t.mul_scalar(ssim_node(t, pred, tgt, cfg), -1.0), 1.0);
    int edge = sobel_edge_node(t, pred, tgt);
    int mae = t.mean_all(t.abs_smooth(t.sub(pred, tgt)));
    LossNode out;
    out.components["ssim"] = ssim_term;
    out.components["edge"] = edge;
    out.components["mae"] = mae;
    out.value = t.add(t.add(t.mul_scalar(ssim_term, cfg.w_ssim), t.mul_scalar(edge, cfg.w_edge)),
                      t.mul_scalar(mae, cfg.w_mae));
    return out;
}

LossNode detection_loss(Tape& t, int det, const DetGridMeta& meta,
                        const std::vector<MatchedCell>& matches, int64_t num_gt) {
    const Tensor& D = t.val(det);
    if (D.ndim() != 3 || D.shape[0] != meta.channels() || D.shape[1] != meta.grid_h || D.shape[2] != meta.grid_w)
        throw std::invalid_argument("detection_loss: grid shape " + D.shape_str() + " does not match meta");
    if (num_gt > 0 && matches.empty())
        throw std::invalid_argument("detection_loss: targets exist but no cells were matched");
    int64_t n = meta.grid_h * meta.grid_w;
    int64_t cdet = meta.num_classes;
    int rows = t.transpose(t.reshape(det, {meta.channels(), n}));  // [N, A]
    int obj = t.slice_cols(rows, 0, 1);
    int box_raw = t.slice_cols(rows, 1, 5);
    int cls = cdet > 1 ? t.slice_cols(rows, 5, 5 + cdet) : -1;

    Tensor obj_y({n, 1});
    Tensor cls_onehot({n, std::max<int64_t>(cdet, 1)});
    Tensor box_tgt({n, 4});
    Tensor box_mask({n, 4});
    for (const auto& m : matches) {
        if (m.cy < 0 || m.cy >= meta.grid_h || m.cx < 0 || m.cx >= meta.grid_w)
            throw std::invalid_argument("detection_loss: matched cell outside grid");
        int64_t i = m.cy * meta.grid_w + m.cx;
        obj_y[i] = 1.0;
        if (m.cls < 0 || m.cls >= cdet) throw std::invalid_argument("detection_loss: class out of range");
        cls_onehot.at(i, m.cls) = 1.0;
        for (int j = 0; j < 4; ++j) {
            // regression happens in log space; floor keeps degenerate offsets finite
            box_tgt.at(i, j) = std::log(std::max(m.ltrb[j], 0.25) / static_cast<double>(meta.stride));
            box_mask.at(i, j) = 1.0;
        }
    }
    Tensor one_minus_y({n, 1});
    int64_t n_pos = 0;
    for (int64_t i = 0; i < n; ++i) {
        one_minus_y[i] = 1.0 - obj_y[i];
        n_pos += obj_y[i] > 0;
    }
    int64_t n_neg = n - n_pos;

    // objectness CE over all cells, class-balanced: matched and unmatched
    // cells contribute equal halves so a few positives are not drowned out
    Tensor cell_w({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        if (n_pos == 0 || n_neg == 0)
            cell_w[i] = 1.0 / static_cast<double>(n);
        else
            cell_w[i] = 0.5 / static_cast<double>(obj_y[i] > 0 ? n_pos : n_neg);
    }
    int sp = t.softplus_(t.mul_scalar(obj, -1.0));
    int bce_cells = t.add(sp, t.mul(obj, t.leaf(std::move(one_minus_y))));
    int obj_ce = t.sum_all(t.mul(bce_cells, t.leaf(std::move(cell_w))));

    int det_ce = obj_ce;
    int sl1 = -1;
    int64_t nm = static_cast<int64_t>(matches.size());
    if (nm > 0) {
        // classification CE over matched cells
        if (cdet > 1) {
            int logp = t.log_softmax_rows(cls);
            int cls_ce = t.mul_scalar(t.sum_all(t.mul(t.leaf(std::move(cls_onehot)), logp)),
                                      -1.0 / static_cast<double>(nm));
            det_ce = t.add(obj_ce, cls_ce);
        }
        // smooth L1 over log-space regression residuals of matched cells
        int resid = t.mul(t.sub(box_raw, t.leaf(std::move(box_tgt))), t.leaf(std::move(box_mask)));
        sl1 = t.mul_scalar(t.sum_all(t.smooth_l1(resid)), 1.0 / static_cast<double>(4 * nm));
    } else {
        sl1 = t.leaf(Tensor::scalar(0.0));
    }

    LossNode out;
    out.components["smooth_l1"] = sl1;
    out.components["det_ce"] = det_ce;
    out.value = t.add(sl1, det_ce);
    return out;
}

TotalLossNodes total_loss(Tape& t, const LossNode& seg, const LossNode& depth,
                          const LossNode& detection, const WeightVector& weights) {
    weights.validate();
    if (weights.w.size() != 3)
        throw std::invalid_argument("total_loss: expected 3 task weights, got " + std::to_string(weights.w.size()));
    TotalLossNodes out;
    out.seg = seg;
    out.depth = depth;
    out.detection = detection;
    out.weights = weights;
    out.total = t.add(t.add(t.mul_scalar(seg.value, weights.w[0]), t.mul_scalar(depth.value, weights.w[1])),
                      t.mul_scalar(detection.value, weights.w[2]));
    return out;
}

LossBreakdown read_breakdown(const Tape& t, const TotalLossNodes& nodes) {
    LossBreakdown b;
    b.total = t.scalar(nodes.total);
    b.seg = t.scalar(nodes.seg.value);
    b.depth = t.scalar(nodes.depth.value);
    b.detection = t.scalar(nodes.detection.value);
    for (const auto& [name, id] : nodes.seg.components) b.components[name] = t.scalar(id);
    for (const auto& [name, id] : nodes.depth.components) b.components[name] = t.scalar(id);
    for (const auto& [name, id] : nodes.detection.components) b.components[name] = t.scalar(id);
    double expect = nodes.weights.w[0] * b.seg + nodes.weights.w[1] * b.depth + nodes.weights.w[2] * b.detection;
    if (std::abs(expect - b.total) > 1e-9)
        throw std::runtime_error("LossBreakdown: total does not match weighted task sum");
    for (const auto& [name, v] : b.components)
        if (!std::isfinite(v)) throw std::runtime_error("LossBreakdown: component '" + name + "' is not finite");
    if (!std::isfinite(b.total)) throw std::runtime_error("LossBreakdown: total is not finite");
    return b;
}

double smooth_l1_value(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }

}  // namespace mtscene
