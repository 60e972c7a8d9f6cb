#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mtscene/metrics.hpp"
#include "mtscene/rng.hpp"

using namespace mtscene;

namespace {

// brute-force AP oracle: walk the score-sorted list, greedily match, and
// integrate the all-point interpolated precision envelope over recall
double ap_oracle(std::vector<Detection> dets, const std::vector<Box>& gt, double thr) {
    if (gt.empty()) return dets.empty() ? 1.0 : 0.0;
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(gt.size(), false);
    std::vector<double> prec, rec;
    int tp = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
        int best = -1;
        double best_iou = thr;
        for (size_t j = 0; j < gt.size(); ++j) {
            if (used[j] || gt[j].cls != dets[i].box.cls) continue;
            double v = iou_box(dets[i].box, gt[j]);
            if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            used[static_cast<size_t>(best)] = true;
            ++tp;
        }
        prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(gt.size()));
    }
    double ap = 0, prev_r = 0;
    for (size_t i = 0; i < prec.size(); ++i) {
        double envelope = 0;
        for (size_t j = i; j < prec.size(); ++j) envelope = std::max(envelope, prec[j]);
        ap += envelope * (rec[i] - prev_r);
        prev_r = rec[i];
    }
    return ap;
}

Tensor mask_from(std::initializer_list<std::initializer_list<int>> rows) {
    Tensor t({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows.begin()->size())});
    int64_t y = 0;
    for (const auto& r : rows) {
        int64_t x = 0;
        for (int v : r) t.at(y, x++) = v;
        ++y;
    }
    return t;
}

}  // namespace

TEST_CASE("dice against counting oracles") {
    Tensor a = mask_from({{1, 1, 0, 0}, {1, 1, 0, 0}});
    CHECK(dice(a, a) == 1.0);

    Tensor b = mask_from({{0, 0, 1, 1}, {0, 0, 1, 1}});
    CHECK(dice(a, b) == 0.0);
    CHECK(dice(a, b) == dice(b, a));

    // pred covers half the target with no extra pixels: 2*(n/2)/(3n/2) = 2/3
    Tensor target = mask_from({{1, 1, 1, 1}, {1, 1, 1, 1}});
    Tensor half = mask_from({{1, 1, 1, 1}, {0, 0, 0, 0}});
    CHECK(dice(half, target) == doctest::Approx(2.0 / 3.0));

    Tensor empty = Tensor::zeros({2, 4});
    CHECK(dice(empty, empty) == 1.0);

    // random counting oracle
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        Tensor p({6, 6}), t({6, 6});
        int64_t inter = 0, np = 0, nt = 0;
        for (int64_t k = 0; k < 36; ++k) {
            p[k] = rng.bernoulli(0.4);
            t[k] = rng.bernoulli(0.4);
            inter += p[k] > 0 && t[k] > 0;
            np += p[k] > 0;
            nt += t[k] > 0;
        }
        double expect = (np + nt) == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
        CHECK(dice(p, t) == doctest::Approx(expect));
    }
}

TEST_CASE("hard mean IoU") {
    Tensor a = mask_from({{0, 1, 1, 0}, {0, 2, 2, 0}});
    CHECK(miou_hard(a, a, 3) == 1.0);

    // disjoint foregrounds: both classes present, IoU 0 each; background IoU 0 too
    Tensor l = mask_from({{1, 0}, {0, 0}});
    Tensor r = mask_from({{0, 1}, {0, 0}});
    // class1: inter 0 / union 2 = 0; class0: inter 2 / union 4 = 0.5
    CHECK(miou_hard(l, r, 2) == doctest::Approx(0.25));

    // half overlap on one class over full-foreground maps
    Tensor p = mask_from({{1, 1, 1, 1}});
    Tensor t = mask_from({{1, 1, 2, 2}});
    // class1: 2/4, class2: 0/2, class0 absent from both -> mean (0.5 + 0)/2
    CHECK(miou_hard(p, t, 3) == doctest::Approx(0.25));

    // classes absent from both are excluded, not counted as 1
    CHECK(miou_hard(p, p, 8) == 1.0);
}

TEST_CASE("depth MAE in millimeters") {
    Tensor a = Tensor::full({4, 4}, 0.30);
    Tensor b = Tensor::full({4, 4}, 0.31);
    CHECK(depth_mae_mm(a, a, 150.0) == 0.0);
    CHECK(depth_mae_mm(a, b, 150.0) == doctest::Approx(1.5));
    CHECK(depth_mae_mm(a, b, 300.0) == doctest::Approx(2.0 * depth_mae_mm(a, b, 150.0)));
}

TEST_CASE("box IoU geometry") {
    Box u{0, 0, 1, 1, 1};
    CHECK(iou_box(u, u) == 1.0);
    CHECK(iou_box(u, Box{2, 2, 3, 3, 1}) == 0.0);
    CHECK(iou_box(u, Box{0.5, 0, 1.5, 1, 1}) == doctest::Approx(1.0 / 3.0));
    CHECK(iou_box(u, Box{0.5, 0, 1.5, 1, 1}) == iou_box(Box{0.5, 0, 1.5, 1, 1}, u));
}

TEST_CASE("average precision closed forms") {
    std::vector<Box> gt = {{0, 0, 10, 10, 1}};
    CHECK(average_precision({{{0, 0, 10, 10, 1}, 0.9}}, gt, 0.5) == 1.0);
    CHECK(average_precision({}, gt, 0.5) == 0.0);

    // ranks 1 and 3 true, rank 2 false -> AP = (1 + 2/3)/2 = 5/6
    std::vector<Box> gt2 = {{0, 0, 10, 10, 1}, {20, 20, 30, 30, 1}};
    std::vector<Detection> dets = {
        {{0, 0, 10, 10, 1}, 0.9},
        {{50, 50, 60, 60, 1}, 0.8},
        {{20, 20, 30, 30, 1}, 0.7},
    };
    CHECK(average_precision(dets, gt2, 0.5) == doctest::Approx(5.0 / 6.0));

    // score rescaling (order-preserving) leaves AP unchanged
    std::vector<Detection> scaled = dets;
    for (auto& d : scaled) d.score *= 100.0;
    CHECK(average_precision(scaled, gt2, 0.5) == average_precision(dets, gt2, 0.5));

    // inserting a top-ranked false positive never increases AP
    std::vector<Detection> with_fp = dets;
    with_fp.insert(with_fp.begin(), {{70, 70, 80, 80, 1}, 0.99});
    CHECK(average_precision(with_fp, gt2, 0.5) <= average_precision(dets, gt2, 0.5));
}

TEST_CASE("average precision matches the brute-force oracle on 200 random instances") {
    Rng rng(11);
    for (int inst = 0; inst < 200; ++inst) {
        // small scenes: up to 5 GT, up to 10 detections, classes 1..2
        std::vector<Box> gt;
        int64_t n_gt = rng.uniform_int(1, 5);
        for (int64_t i = 0; i < n_gt; ++i) {
            double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            gt.push_back({x, y, x + rng.uniform(4, 12), y + rng.uniform(4, 12), static_cast<int>(rng.uniform_int(1, 2))});
        }
        std::vector<Detection> dets;
        int64_t n_det = rng.uniform_int(0, 10);
        for (int64_t i = 0; i < n_det; ++i) {
            // half the detections perturb a GT box, half are random
            Box b;
            if (rng.bernoulli(0.5)) {
                b = gt[static_cast<size_t>(rng.uniform_int(0, n_gt - 1))];
                b.x0 += rng.uniform(-3, 3);
                b.y0 += rng.uniform(-3, 3);
                b.x1 += rng.uniform(-3, 3);
                b.y1 += rng.uniform(-3, 3);
                if (b.x1 <= b.x0) b.x1 = b.x0 + 1;
                if (b.y1 <= b.y0) b.y1 = b.y0 + 1;
            } else {
                double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
                b = {x, y, x + rng.uniform(2, 10), y + rng.uniform(2, 10), static_cast<int>(rng.uniform_int(1, 2))};
            }
            dets.push_back({b, rng.uniform(0, 1)});
        }

        // per class, restricted instance must agree exactly with the oracle
        for (int cls = 1; cls <= 2; ++cls) {
            std::vector<Box> gt_c;
            std::vector<Detection> det_c;
            for (const Box& b : gt)
                if (b.cls == cls) gt_c.push_back(b);
            for (const Detection& d : dets)
                if (d.box.cls == cls) det_c.push_back(d);
            if (gt_c.empty()) continue;
            CHECK(average_precision(det_c, gt_c, 0.5) == ap_oracle(det_c, gt_c, 0.5));
        }
    }
}

TEST_CASE("dataset-level AP pools the curve across images") {
    // two images, one GT each; image 0 has a perfect high-score detection,
    // image 1 has a misplaced one. Pooled: tp at rank 1, fp at rank 2 -> AP 0.5.
    std::vector<std::vector<Box>> gt = {{{0, 0, 10, 10, 1}}, {{0, 0, 10, 10, 1}}};
    std::vector<std::vector<Detection>> dets = {
        {{{0, 0, 10, 10, 1}, 0.9}},
        {{{30, 30, 40, 40, 1}, 0.8}},
    };
    auto ap = dataset_average_precision(dets, gt, 0.5);
    REQUIRE(ap.count(1) == 1);
    CHECK(ap.at(1) == doctest::Approx(0.5));

    // a duplicate match in one image cannot claim a GT in another image
    std::vector<std::vector<Detection>> dup = {
        {{{0, 0, 10, 10, 1}, 0.9}, {{0, 0, 10, 10, 1}, 0.85}},
        {},
    };
    auto ap2 = dataset_average_precision(dup, gt, 0.5);
    CHECK(ap2.at(1) == doctest::Approx(0.5));

    CHECK_THROWS_AS(dataset_average_precision({{}}, gt, 0.5), std::invalid_argument);
}

TEST_CASE("eval report serialization") {
    EvalReport r;
    r.dice = 0.5;
    r.miou = 0.25;
    r.map50 = 0.75;
    r.per_class_ap[1] = 0.75;
    r.depth_mae_mm = 2.25;
    r.images = 4;
    r.instances = 9;
    std::string j = r.to_json();
    CHECK(j.find("\"dice\"") != std::string::npos);
    CHECK(j.find("0.75") != std::string::npos);
    std::string row = r.csv_row("runA");
    CHECK(row.find("runA") != std::string::npos);
    CHECK(EvalReport::csv_header().find("dice") != std::string::npos);
    // header and row have the same number of columns
    auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
    CHECK(commas(row) == commas(EvalReport::csv_header()));
}
