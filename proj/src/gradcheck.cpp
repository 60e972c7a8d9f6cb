#include "mtscene/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtscene/rng.hpp"

namespace mtscene {

double grad_check(const ScalarGraphFn& f, ParamStore& params, double step,
                  int64_t max_coords_per_param, uint64_t sample_seed) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

    params.zero_grad();
    std::vector<Tensor> analytic;
    {
        Tape tape;
        int out = f(tape, params);
        if (tape.val(out).numel() != 1)
            throw std::invalid_argument("grad_check: function output is not a scalar, got " +
                                        tape.val(out).shape_str());
        tape.backward_scalar(out);
        for (size_t p = 0; p < params.size(); ++p) analytic.push_back(params.at(static_cast<int>(p)).grad);
    }

    auto eval = [&]() {
        Tape tape;
        return tape.scalar(f(tape, params));
    };

    double max_rel = 0.0;
    for (size_t p = 0; p < params.size(); ++p) {
        auto& e = params.at(static_cast<int>(p));
        if (!e.trainable) continue;
        int64_t n = e.value.numel();
        std::vector<int64_t> coords;
        if (max_coords_per_param < 0 || max_coords_per_param >= n) {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            Rng rng(mix_seed(sample_seed, p));
            for (int64_t i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.uniform_int(0, n - 1));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        for (int64_t i : coords) {
            double orig = e.value[i];
            e.value[i] = orig + step;
            double fp = eval();
            e.value[i] = orig - step;
            double fm = eval();
            e.value[i] = orig;
            double cd = (fp - fm) / (2.0 * step);
            double a = analytic[p][i];
            double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-12});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace mtscene
