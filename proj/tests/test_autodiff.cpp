#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtscene/gradcheck.hpp"
#include "mtscene/rng.hpp"
#include "mtscene/tape.hpp"

using namespace mtscene;

namespace {

Tensor randn(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// max grad_check error of `build` over `trials` random points
double check_op(const std::function<int(Tape&, ParamStore&)>& build, const std::function<ParamStore(Rng&)>& make,
                int trials = 10, double step = 1e-6) {
    double worst = 0.0;
    Rng rng(99);
    for (int i = 0; i < trials; ++i) {
        ParamStore ps = make(rng);
        worst = std::max(worst, grad_check(build, ps, step));
    }
    return worst;
}

}  // namespace

TEST_CASE("forward closed forms") {
    Tape t;
    ParamStore ps;
    ps.add("x", Tensor::scalar(3.0));
    int x = t.param(ps, "x");
    int y = t.mul(x, x);
    CHECK(t.scalar(y) == doctest::Approx(9.0));

    // identity: a leaf passes through unchanged
    Tensor v({2, 2});
    v.data = {1, 2, 3, 4};
    int id = t.leaf(v);
    CHECK(t.val(id).data == v.data);

    int sm = t.softmax_rows(t.leaf(Tensor::zeros({1, 3})));
    for (int i = 0; i < 3; ++i) CHECK(t.val(sm)[i] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("backward closed forms") {
    {
        Tape t;
        ParamStore ps;
        ps.add("x", Tensor::scalar(3.0));
        int x = t.param(ps, "x");
        t.backward_scalar(t.mul(x, x));
        CHECK(ps.at("x").grad[0] == doctest::Approx(6.0));
    }
    {
        Tape t;
        ParamStore ps;
        ps.add("x", Tensor::full({5}, 2.5));
        t.backward_scalar(t.sum_all(t.param(ps, "x")));
        for (int i = 0; i < 5; ++i) CHECK(ps.at("x").grad[i] == doctest::Approx(1.0));
    }
}

TEST_CASE("softmax cross-entropy gradient at uniform logits") {
    ParamStore ps;
    ps.add("logits", Tensor::zeros({1, 3}));
    auto f = [](Tape& t, ParamStore& p) {
        // CE with target class 0: -log_softmax(logits)[0]
        int ls = t.log_softmax_rows(t.param(p, "logits"));
        return t.mul_scalar(t.sum_all(t.slice_cols(ls, 0, 1)), -1.0);
    };
    {
        Tape t;
        f(t, ps);
        ps.zero_grad();
        Tape t2;
        t2.backward_scalar(f(t2, ps));
        CHECK(ps.at("logits").grad[0] == doctest::Approx(-2.0 / 3.0));
        CHECK(ps.at("logits").grad[1] == doctest::Approx(1.0 / 3.0));
        CHECK(ps.at("logits").grad[2] == doctest::Approx(1.0 / 3.0));
    }
    CHECK(grad_check(f, ps, 1e-6) < 1e-7);
}

TEST_CASE("grad_check oracle properties") {
    // quadratic form x^T x: exact to near machine precision
    ParamStore ps;
    Rng rng(5);
    ps.add("x", randn({7}, rng));
    auto quad = [](Tape& t, ParamStore& p) {
        int x = t.param(p, "x");
        return t.sum_all(t.mul(x, x));
    };
    CHECK(grad_check(quad, ps, 1e-6) < 1e-7);

    // constant function: analytic and numeric gradients are both zero
    auto constant = [](Tape& t, ParamStore& p) {
        t.param(p, "x");
        return t.leaf(Tensor::scalar(4.0));
    };
    CHECK(grad_check(constant, ps, 1e-6) == 0.0);
}

TEST_CASE("per-operator gradient checks at random points") {
    auto two = [](Rng& rng) {
        ParamStore ps;
        Rng r(rng.uniform_int(1, 1 << 30));
        ps.add("a", randn({3, 4}, r));
        ps.add("b", randn({3, 4}, r, 0.5, 2.0));  // positive for div/log
        return ps;
    };

    auto op2 = [&](auto make_node) {
        return check_op(
            [make_node](Tape& t, ParamStore& p) {
                return t.mean_all(make_node(t, t.param(p, "a"), t.param(p, "b")));
            },
            two);
    };
    CHECK(op2([](Tape& t, int a, int b) { return t.add(a, b); }) < 1e-4);
    CHECK(op2([](Tape& t, int a, int b) { return t.sub(a, b); }) < 1e-4);
    CHECK(op2([](Tape& t, int a, int b) { return t.mul(a, b); }) < 1e-4);
    CHECK(op2([](Tape& t, int a, int b) { return t.div(a, b); }) < 1e-4);

    auto op1 = [&](auto make_node, double lo, double hi) {
        return check_op(
            [make_node](Tape& t, ParamStore& p) { return t.mean_all(make_node(t, t.param(p, "a"))); },
            [&](Rng& rng) {
                ParamStore ps;
                Rng r(rng.uniform_int(1, 1 << 30));
                ps.add("a", randn({3, 4}, r, lo, hi));
                return ps;
            });
    };
    CHECK(op1([](Tape& t, int a) { return t.exp_(a); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.log_(a); }, 0.5, 2) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.sigmoid_(a); }, -2, 2) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.softplus_(a); }, -2, 2) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.abs_smooth(a, 1e-6); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.smooth_l1(a); }, -2, 2) < 1e-4);
    // mean(softmax) alone is constant (rows sum to 1), so square it first
    CHECK(op1([](Tape& t, int a) { int s = t.softmax_rows(a); return t.mul(s, s); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.log_softmax_rows(a); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.col_sum(a); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.transpose(a); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.reshape(a, {4, 3}); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.slice_cols(a, 1, 3); }, -1, 1) < 1e-4);
    CHECK(op1([](Tape& t, int a) { return t.sum_all(a); }, -1, 1) < 1e-4);

    // matmul
    CHECK(check_op(
              [](Tape& t, ParamStore& p) { return t.mean_all(t.matmul(t.param(p, "a"), t.param(p, "b"))); },
              [](Rng& rng) {
                  ParamStore ps;
                  Rng r(rng.uniform_int(1, 1 << 30));
                  ps.add("a", randn({3, 4}, r));
                  ps.add("b", randn({4, 2}, r));
                  return ps;
              }) < 1e-4);

    // window ops on [C,H,W]
    auto chw = [](Rng& rng) {
        ParamStore ps;
        Rng r(rng.uniform_int(1, 1 << 30));
        ps.add("x", randn({2, 6, 6}, r));
        ps.add("w", randn({3, 2, 3, 3}, r));
        ps.add("b", randn({3}, r));
        return ps;
    };
    CHECK(check_op(
              [](Tape& t, ParamStore& p) {
                  return t.mean_all(t.conv2d(t.param(p, "x"), t.param(p, "w"), t.param(p, "b"), 2, 1));
              },
              chw) < 1e-4);
    CHECK(check_op([](Tape& t, ParamStore& p) { return t.mean_all(t.avg_pool(t.param(p, "x"), 3, 1)); }, chw) < 1e-4);
    CHECK(check_op([](Tape& t, ParamStore& p) { return t.mean_all(t.bilinear_resize(t.param(p, "x"), 9, 5)); },
                   chw) < 1e-4);
    CHECK(check_op([](Tape& t, ParamStore& p) { return t.mean_all(t.add_chan_bias(t.param(p, "x"), t.param(p, "b"))); },
                   [](Rng& rng) {
                       ParamStore ps;
                       Rng r(rng.uniform_int(1, 1 << 30));
                       ps.add("x", randn({3, 4, 4}, r));
                       ps.add("b", randn({3}, r));
                       return ps;
                   }) < 1e-4);

    // fused layers and concatenation
    CHECK(check_op(
              [](Tape& t, ParamStore& p) {
                  return t.mean_all(t.layer_norm(t.param(p, "x"), t.param(p, "g"), t.param(p, "b")));
              },
              [](Rng& rng) {
                  ParamStore ps;
                  Rng r(rng.uniform_int(1, 1 << 30));
                  ps.add("x", randn({4, 6}, r));
                  ps.add("g", randn({6}, r, 0.5, 1.5));
                  ps.add("b", randn({6}, r));
                  return ps;
              }) < 1e-4);
    CHECK(check_op(
              [](Tape& t, ParamStore& p) {
                  int a = t.param(p, "a");
                  return t.mean_all(t.concat_cols({a, t.add_row_bias(a, t.param(p, "r"))}));
              },
              [](Rng& rng) {
                  ParamStore ps;
                  Rng r(rng.uniform_int(1, 1 << 30));
                  ps.add("a", randn({3, 4}, r));
                  ps.add("r", randn({4}, r));
                  return ps;
              }) < 1e-4);
    CHECK(check_op(
              [](Tape& t, ParamStore& p) {
                  int x = t.param(p, "x");
                  return t.mean_all(t.concat_chan({x, t.mul_scalar(x, 2.0)}));
              },
              chw) < 1e-4);
}

TEST_CASE("determinism and purity") {
    auto run = [](std::vector<double>* grads) {
        Rng rng(123);
        ParamStore ps;
        ps.add("a", randn({4, 4}, rng));
        ps.add("w", randn({2, 1, 3, 3}, rng));
        Tape t;
        int x = t.reshape(t.param(ps, "a"), {1, 4, 4});
        int y = t.conv2d(x, t.param(ps, "w"), -1, 1, 1);
        int out = t.mean_all(t.mul(t.sigmoid_(y), y));
        t.backward_scalar(out);
        for (size_t p = 0; p < ps.size(); ++p)
            for (double g : ps.at(static_cast<int>(p)).grad.data) grads->push_back(g);
        return t.scalar(out);
    };
    std::vector<double> g1, g2;
    double v1 = run(&g1), v2 = run(&g2);
    CHECK(v1 == v2);  // bit-identical
    CHECK(g1 == g2);
}

TEST_CASE("shape errors are descriptive") {
    Tape t;
    int a = t.leaf(Tensor::zeros({2, 3}));
    int b = t.leaf(Tensor::zeros({3, 3}));
    CHECK_THROWS_AS((void)t.add(a, b), std::runtime_error);
    CHECK_THROWS_AS((void)t.matmul(a, a), std::runtime_error);
    CHECK_THROWS_AS(t.backward(a, Tensor::zeros({4})), std::runtime_error);
    CHECK_THROWS_AS((void)t.reshape(a, {5}), std::runtime_error);
}
