#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtscene/losses.hpp"
#include "mtscene/tensor.hpp"

namespace mtscene {

// exp(-eta * loss) shrinks high-loss weights (the formula as written);
// AmplifyHighLoss flips the sign so high-loss tasks gain weight.
enum class BalancerSign { AsWritten, AmplifyHighLoss };

enum class BalancerMode { Awu, GradientAlignment, Fixed };

struct BalancerConfig {
    double eta = 0.005;  // small enough that weights stay informative over a full desk-scale run
    double eps = 1e-8;
    double lambda_reg = 1e-3;
    BalancerSign sign = BalancerSign::AsWritten;
    BalancerMode mode = BalancerMode::Awu;
    int64_t align_every = 10;
    void validate() const;
};

// Row t = flattened gradient of task-t loss w.r.t. the shared parameters.
struct TaskGradients {
    int64_t tasks = 0, params = 0;
    std::vector<double> data;  // row-major [tasks x params]

    TaskGradients() = default;
    TaskGradients(int64_t t, int64_t p) : tasks(t), params(p), data(static_cast<size_t>(t * p), 0.0) {}

    double& at(int64_t t, int64_t p) { return data[static_cast<size_t>(t * params + p)]; }
    double at(int64_t t, int64_t p) const { return data[static_cast<size_t>(t * params + p)]; }
};

// One multiplicative-weights step: w_t * exp(-+eta * loss_t), epsilon-guarded
// normalization, then exact renormalization onto the simplex.
WeightVector awu_step(const WeightVector& weights, const std::vector<double>& losses,
                      const BalancerConfig& cfg);

// G * G^T + lambda * I as a [T,T] tensor.
Tensor gram(const TaskGradients& grads, double lambda_reg);

// Solve (G G^T + lambda I) w = 1_T, clamp negatives, normalize onto the simplex.
WeightVector optimal_weights(const TaskGradients& grads, const BalancerConfig& cfg);

// Solve residual ||M w_raw - 1||_inf of the unclamped solution (for verification).
double optimal_weights_residual(const TaskGradients& grads, const BalancerConfig& cfg);

struct BalancerState {
    WeightVector weights;
    int64_t step = 0;  // completed steps
};

// Scheduling policy: awu every step, gradient alignment every align_every
// steps (holding weights in between), fixed never changes them.
WeightVector next_weights(BalancerState& state, const std::vector<double>& losses,
                          const TaskGradients* grads, const BalancerConfig& cfg);

std::string to_string(BalancerMode m);
BalancerMode balancer_mode_from_string(const std::string& s);

}  // namespace mtscene
