#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mtscene/metrics.hpp"
#include "mtscene/model.hpp"
#include "mtscene/rng.hpp"

using namespace mtscene;

namespace {

Tensor random_image(int64_t h, int64_t w, uint64_t seed) {
    Rng rng(seed);
    Tensor t({3, h, w});
    for (double& v : t.data) v = rng.uniform(0.0, 1.0);
    return t;
}

ModelConfig micro_config() {
    ModelConfig mc;
    mc.stages = {{3, 2, 6, 1, 1}, {3, 2, 8, 1, 2}};
    mc.drop_path_max = 0.0;
    mc.decoder_dim = 8;
    return mc;
}

}  // namespace

TEST_CASE("encoder stage extents follow the stride products") {
    Model model(ModelConfig{}, 1);  // default: strides 4/2/2, dims 16/32/64
    Tape t;
    auto feats = model.encoder_forward(t, random_image(64, 64, 2));
    REQUIRE(feats.size() == 3);
    CHECK(t.val(feats[0]).shape == std::vector<int64_t>{16, 16, 16});
    CHECK(t.val(feats[1]).shape == std::vector<int64_t>{32, 8, 8});
    CHECK(t.val(feats[2]).shape == std::vector<int64_t>{64, 4, 4});

    // indivisible extents rejected with the required divisor named
    CHECK_THROWS_WITH_AS(model.encoder_forward(t, random_image(60, 64, 3)),
                         doctest::Contains("divisible by the total stride 16"), std::invalid_argument);
}

TEST_CASE("decoder fuses to quarter resolution at the configured width") {
    Model model(ModelConfig{}, 1);
    Tape t;
    Tensor img = random_image(64, 64, 4);
    auto f = model.forward(t, img);
    CHECK(t.val(f.fused).shape == std::vector<int64_t>{64, 16, 16});
    CHECK(t.val(f.seg_logits).shape == std::vector<int64_t>{2, 64, 64});
    CHECK(t.val(f.depth).shape == std::vector<int64_t>{64, 64});
    CHECK(t.val(f.det).shape == std::vector<int64_t>{6, 16, 16});
    CHECK(f.det_meta.stride == 4);

    // depth strictly inside (0,1)
    for (double v : t.val(f.depth).data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    // single-stage degenerate config still produces a quarter-resolution fuse
    ModelConfig one;
    one.stages = {{7, 4, 8, 1, 1}};
    one.decoder_dim = 8;
    one.drop_path_max = 0.0;
    Model m1(one, 1);
    Tape t1;
    auto f1 = m1.forward(t1, random_image(32, 32, 5));
    CHECK(t1.val(f1.fused).shape == std::vector<int64_t>{8, 8, 8});
}

TEST_CASE("drop path off: training and evaluation forwards agree; determinism") {
    ModelConfig mc;
    mc.drop_path_max = 0.0;
    Model model(mc, 3);
    Tensor img = random_image(32, 32, 6);

    Tape te, tt, te2;
    Rng drop(9);
    auto fe = model.forward(te, img, false, nullptr);
    auto ft = model.forward(tt, img, true, &drop);
    auto fe2 = model.forward(te2, img, false, nullptr);
    CHECK(te.val(fe.seg_logits).data == tt.val(ft.seg_logits).data);
    CHECK(te.val(fe.depth).data == tt.val(ft.depth).data);
    CHECK(te.val(fe.det).data == te2.val(fe2.det).data);  // bit-identical repeat

    // with drop path on, gates actually fire under training
    ModelConfig dp;
    dp.drop_path_max = 0.9;
    Model m2(dp, 3);
    Tape ta, tb;
    Rng drop2(1);
    auto fa = m2.forward(ta, img, true, &drop2);
    auto fb = m2.forward(tb, img, false, nullptr);
    CHECK(ta.val(fa.seg_logits).data != tb.val(fb.seg_logits).data);
}

TEST_CASE("zeroed depth head gives 0.5 everywhere") {
    Model model(micro_config(), 1);
    for (const char* name : {"head.depth.hidden.w", "head.depth.hidden.b", "head.depth.out.w", "head.depth.out.b"})
        for (double& v : model.params().at(name).value.data) v = 0.0;
    Tape t;
    auto f = model.forward(t, random_image(16, 16, 7));
    for (double v : t.val(f.depth).data) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("target matching rules") {
    DetGridMeta meta{8, 8, 4, 2};

    {  // box centered at the image center lands in the central cell
        auto m = match_targets({{14.0, 14.0, 18.0, 18.0, 1}}, meta);  // center (16,16)
        REQUIRE(m.size() == 1);
        CHECK(m[0].cx == 4);
        CHECK(m[0].cy == 4);
        CHECK(m[0].cls == 0);
        // distances from the cell center (18,18)
        CHECK(m[0].ltrb[0] == doctest::Approx(4.0));
        CHECK(m[0].ltrb[2] == doctest::Approx(0.0));
    }
    {  // center on a cell boundary goes to the half-open interval that contains it
        auto m = match_targets({{6.0, 6.0, 10.0, 10.0, 1}}, meta);  // center exactly (8,8)
        REQUIRE(m.size() == 1);
        CHECK(m[0].cx == 2);
        CHECK(m[0].cy == 2);
    }
    {  // same cell: larger area wins
        Box small{1.0, 1.0, 3.0, 6.0, 1};   // area 10, center (2, 3.5)
        Box large{0.0, 0.0, 4.0, 5.0, 2};   // area 20, center (2, 2.5)
        auto m = match_targets({small, large}, meta);
        REQUIRE(m.size() == 1);
        CHECK(m[0].cls == 1);  // class 2, 0-based
    }
    CHECK_THROWS_AS(match_targets({{5.0, 5.0, 5.0, 9.0, 1}}, meta), std::invalid_argument);
}

TEST_CASE("detection decoding and NMS") {
    DetGridMeta meta{8, 8, 4, 1};
    {  // all cells below threshold -> empty
        Tensor grid = Tensor::full({meta.channels(), 8, 8}, -10.0);
        CHECK(decode_detections(grid, meta, 0.5, 0.5).empty());
    }
    {  // one hot cell decodes to its exact extent
        Tensor grid = Tensor::full({meta.channels(), 8, 8}, -10.0);
        grid.at(0, 2, 3) = 10.0;
        double l = 5, tp = 3, r = 4, b = 6;
        grid.at(1, 2, 3) = std::log(l / 4.0);
        grid.at(2, 2, 3) = std::log(tp / 4.0);
        grid.at(3, 2, 3) = std::log(r / 4.0);
        grid.at(4, 2, 3) = std::log(b / 4.0);
        auto dets = decode_detections(grid, meta, 0.5, 0.5);
        REQUIRE(dets.size() == 1);
        // cell center (14, 10)
        CHECK(dets[0].box.x0 == doctest::Approx(14.0 - l));
        CHECK(dets[0].box.y0 == doctest::Approx(10.0 - tp));
        CHECK(dets[0].box.x1 == doctest::Approx(14.0 + r));
        CHECK(dets[0].box.y1 == doctest::Approx(10.0 + b));
        CHECK(dets[0].box.cls == 1);
    }
    {  // two identical overlapping predictions: one survives NMS at iou 0.5
        Tensor grid = Tensor::full({meta.channels(), 8, 8}, -10.0);
        // both cells decode to the same box x in [10,22], y in [6,14]
        for (int64_t cx : {3, 4}) {
            double cxp = (cx + 0.5) * 4.0;
            grid.at(0, 2, cx) = 3.0;
            grid.at(1, 2, cx) = std::log((cxp - 10.0) / 4.0);
            grid.at(2, 2, cx) = std::log(4.0 / 4.0);
            grid.at(3, 2, cx) = std::log((22.0 - cxp) / 4.0);
            grid.at(4, 2, cx) = std::log(4.0 / 4.0);
        }
        grid.at(0, 2, 3) = 4.0;  // make scores distinct
        auto dets = decode_detections(grid, meta, 0.5, 0.5);
        REQUIRE(dets.size() == 1);
        CHECK(dets[0].score > 0.9);
    }
    {  // brute-force NMS oracle on a random grid
        Rng rng(21);
        Tensor grid({meta.channels(), 8, 8});
        for (double& v : grid.data) v = rng.uniform(-2.0, 2.0);
        auto dets = decode_detections(grid, meta, 0.3, 0.5);
        // survivors must be mutually below the NMS threshold per class
        for (size_t i = 0; i < dets.size(); ++i)
            for (size_t j = i + 1; j < dets.size(); ++j)
                if (dets[i].box.cls == dets[j].box.cls) CHECK(iou_box(dets[i].box, dets[j].box) < 0.5);
        // scores descending
        for (size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
    }
    CHECK_THROWS_AS(decode_detections(Tensor::zeros({6, 8, 8}), meta, 1.5, 0.5), std::invalid_argument);
}

TEST_CASE("decode of saturated ground truth reproduces the boxes within a pixel") {
    DetGridMeta meta{16, 16, 4, 1};
    std::vector<Box> boxes = {{5.0, 7.0, 30.0, 25.0, 1}, {40.0, 41.0, 60.0, 62.0, 1}};
    auto matches = match_targets(boxes, meta);
    Tensor grid = Tensor::full({meta.channels(), 16, 16}, -30.0);
    for (const auto& m : matches) {
        grid.at(0, m.cy, m.cx) = 30.0;
        for (int j = 0; j < 4; ++j) grid.at(1 + j, m.cy, m.cx) = std::log(m.ltrb[j] / 4.0);
    }
    auto dets = decode_detections(grid, meta, 0.5, 0.5);
    REQUIRE(dets.size() == boxes.size());
    for (const auto& b : boxes) {
        double best = 0;
        for (const auto& d : dets) best = std::max(best, iou_box(d.box, b));
        CHECK(best > 0.95);
        bool close = false;
        for (const auto& d : dets)
            if (std::abs(d.box.x0 - b.x0) < 1 && std::abs(d.box.y0 - b.y0) < 1 && std::abs(d.box.x1 - b.x1) < 1 &&
                std::abs(d.box.y1 - b.y1) < 1)
                close = true;
        CHECK(close);
    }
}

TEST_CASE("checkpoint round trip is byte-exact and validates the manifest") {
    Model model(micro_config(), 11);
    std::string p1 = "/tmp/mtscene_test_ck1.bin", p2 = "/tmp/mtscene_test_ck2.bin";
    save_checkpoint(p1, model);
    Model loaded = load_checkpoint(p1);
    save_checkpoint(p2, loaded);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    std::string b1 = slurp(p1), b2 = slurp(p2);
    CHECK(b1.size() > 0);
    CHECK(b1 == b2);

    // same config, same outputs after the float32 round trip
    Tape ta, tb;
    Tensor img = random_image(16, 16, 12);
    // cast original params to float32 so both sides saw the same storage precision
    for (size_t i = 0; i < model.params().size(); ++i)
        for (double& v : model.params().at(static_cast<int>(i)).value.data) v = static_cast<float>(v);
    auto fa = model.forward(ta, img);
    auto fb = loaded.forward(tb, img);
    CHECK(ta.val(fa.depth).data == tb.val(fb.depth).data);

    CHECK_THROWS_AS(load_checkpoint("/tmp/definitely_missing_ck.bin"), std::runtime_error);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("config validation and json round trip") {
    ModelConfig bad;
    bad.stages[0].stride = 9;  // stride > patch
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ModelConfig{};
    bad.stages[1].embed_dim = 8;  // decreasing dims
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ModelConfig{};
    bad.stages[2].num_heads = 5;  // 64 % 5 != 0
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ModelConfig{};
    bad.drop_path_max = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    ModelConfig mc = micro_config();
    ModelConfig rt = model_config_from_json(to_json(mc));
    CHECK(rt.stages.size() == mc.stages.size());
    CHECK(rt.decoder_dim == mc.decoder_dim);
    CHECK(rt.stages[1].num_heads == mc.stages[1].num_heads);
}
