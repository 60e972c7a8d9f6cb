#include "mtscene/balancer.hpp"

#include <algorithm>
#include <cmath>

namespace mtscene {

namespace {

// floor at eps, then rescale so the sum is exactly 1
WeightVector finalize_simplex(std::vector<double> w, double eps) {
    double s = 0.0;
    for (double& x : w) {
        x = std::max(x, eps);
        s += x;
    }
    for (double& x : w) x /= s;
    return WeightVector(std::move(w));
}

}  // namespace

void BalancerConfig::validate() const {
    if (!(eta > 0)) throw std::invalid_argument("BalancerConfig: eta must be positive");
    if (!(eps > 0)) throw std::invalid_argument("BalancerConfig: eps must be positive");
    if (lambda_reg < 0) throw std::invalid_argument("BalancerConfig: lambda_reg must be non-negative");
    if (align_every < 1) throw std::invalid_argument("BalancerConfig: align_every must be positive");
}

WeightVector awu_step(const WeightVector& weights, const std::vector<double>& losses,
                      const BalancerConfig& cfg) {
    cfg.validate();
    weights.validate();
    if (losses.size() != weights.w.size())
        throw std::invalid_argument("awu_step: " + std::to_string(losses.size()) + " losses for " +
                                    std::to_string(weights.w.size()) + " weights");
    for (double l : losses)
        if (!std::isfinite(l)) throw std::invalid_argument("awu_step: non-finite loss");

    double sgn = cfg.sign == BalancerSign::AsWritten ? -1.0 : 1.0;
    size_t t = weights.w.size();
    // shift the exponent to avoid under/overflow; the exact renormalization
    // below makes the result independent of the shift
    double shift = sgn * cfg.eta * losses[0];
    for (size_t i = 1; i < t; ++i) shift = std::max(shift, sgn * cfg.eta * losses[i]);
    std::vector<double> raw(t);
    double s = 0.0;
    for (size_t i = 0; i < t; ++i) s += raw[i] = weights.w[i] * std::exp(sgn * cfg.eta * losses[i] - shift);
    // documented intermediate: divide by the eps-augmented sum
    for (double& x : raw) x /= (s + cfg.eps);
    return finalize_simplex(std::move(raw), cfg.eps);
}

Tensor gram(const TaskGradients& grads, double lambda_reg) {
    if (grads.tasks < 1) throw std::invalid_argument("gram: need at least one task row");
    for (double v : grads.data)
        if (!std::isfinite(v)) throw std::invalid_argument("gram: non-finite gradient entry");
    int64_t t = grads.tasks, p = grads.params;
    Tensor m({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i; j < t; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < p; ++k) acc += grads.at(i, k) * grads.at(j, k);
            m.at(i, j) = acc;
            m.at(j, i) = acc;
        }
    for (int64_t i = 0; i < t; ++i) m.at(i, i) += lambda_reg;
    return m;
}

namespace {

// Gaussian elimination with partial pivoting; rhs overwritten by the solution.
void solve_inplace(Tensor m, std::vector<double>& rhs) {
    int64_t n = m.shape[0];
    for (int64_t col = 0; col < n; ++col) {
        int64_t piv = col;
        for (int64_t r = col + 1; r < n; ++r)
            if (std::abs(m.at(r, col)) > std::abs(m.at(piv, col))) piv = r;
        if (std::abs(m.at(piv, col)) < 1e-300)
            throw std::runtime_error(
                "optimal_weights: singular Gram matrix; use lambda_reg > 0 to regularize");
        if (piv != col) {
            for (int64_t c = 0; c < n; ++c) std::swap(m.at(piv, c), m.at(col, c));
            std::swap(rhs[static_cast<size_t>(piv)], rhs[static_cast<size_t>(col)]);
        }
        for (int64_t r = col + 1; r < n; ++r) {
            double f = m.at(r, col) / m.at(col, col);
            if (f == 0.0) continue;
            for (int64_t c = col; c < n; ++c) m.at(r, c) -= f * m.at(col, c);
            rhs[static_cast<size_t>(r)] -= f * rhs[static_cast<size_t>(col)];
        }
    }
    for (int64_t r = n - 1; r >= 0; --r) {
        double acc = rhs[static_cast<size_t>(r)];
        for (int64_t c = r + 1; c < n; ++c) acc -= m.at(r, c) * rhs[static_cast<size_t>(c)];
        rhs[static_cast<size_t>(r)] = acc / m.at(r, r);
    }
}

std::vector<double> raw_alignment_weights(const TaskGradients& grads, const BalancerConfig& cfg) {
    Tensor m = gram(grads, cfg.lambda_reg);
    std::vector<double> w(static_cast<size_t>(grads.tasks), 1.0);
    solve_inplace(std::move(m), w);
    return w;
}

}  // namespace

WeightVector optimal_weights(const TaskGradients& grads, const BalancerConfig& cfg) {
    cfg.validate();
    std::vector<double> w = raw_alignment_weights(grads, cfg);
    double s = 0.0;
    for (double& x : w) s += (x = std::max(x, 0.0));
    if (s <= 0.0) {
        // degenerate solve (all components clamped); fall back to uniform
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        return WeightVector(std::move(w));
    }
    for (double& x : w) x /= (s + cfg.eps);
    return finalize_simplex(std::move(w), cfg.eps);
}

double optimal_weights_residual(const TaskGradients& grads, const BalancerConfig& cfg) {
    std::vector<double> w = raw_alignment_weights(grads, cfg);
    Tensor m = gram(grads, cfg.lambda_reg);
    double worst = 0.0;
    for (int64_t i = 0; i < grads.tasks; ++i) {
        double acc = -1.0;
        for (int64_t j = 0; j < grads.tasks; ++j) acc += m.at(i, j) * w[static_cast<size_t>(j)];
        worst = std::max(worst, std::abs(acc));
    }
    return worst;
}

WeightVector next_weights(BalancerState& state, const std::vector<double>& losses,
                          const TaskGradients* grads, const BalancerConfig& cfg) {
    cfg.validate();
    state.weights.validate();
    state.step += 1;
    switch (cfg.mode) {
        case BalancerMode::Fixed:
            break;
        case BalancerMode::Awu:
            state.weights = awu_step(state.weights, losses, cfg);
            break;
        case BalancerMode::GradientAlignment:
            if (state.step % cfg.align_every == 0) {
                if (!grads)
                    throw std::invalid_argument(
                        "next_weights: gradient-alignment mode requires task gradients");
                state.weights = optimal_weights(*grads, cfg);
            }
            break;
    }
    return state.weights;
}

std::string to_string(BalancerMode m) {
    switch (m) {
        case BalancerMode::Awu: return "awu";
        case BalancerMode::GradientAlignment: return "gradient-alignment";
        case BalancerMode::Fixed: return "fixed";
    }
    return "?";
}

BalancerMode balancer_mode_from_string(const std::string& s) {
    if (s == "awu") return BalancerMode::Awu;
    if (s == "gradient-alignment") return BalancerMode::GradientAlignment;
    if (s == "fixed") return BalancerMode::Fixed;
    throw std::invalid_argument("unknown balancer mode '" + s + "'");
}

}  // namespace mtscene
