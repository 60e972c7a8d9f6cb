#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtscene/tensor.hpp"

namespace mtscene {

// Named trainable parameters. Values are owned here; a Tape references
// entries by index and accumulates gradients back after a reverse sweep.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        bool trainable = true;
    };

    int add(const std::string& name, Tensor init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
        int id = static_cast<int>(entries_.size());
        Entry e;
        e.name = name;
        e.grad = Tensor::zeros(init.shape);
        e.value = std::move(init);
        e.trainable = trainable;
        entries_.push_back(std::move(e));
        index_[name] = id;
        return id;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int id(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

    Entry& at(int id) { return entries_.at(static_cast<size_t>(id)); }
    const Entry& at(int id) const { return entries_.at(static_cast<size_t>(id)); }
    Entry& at(const std::string& name) { return entries_.at(static_cast<size_t>(id(name))); }
    const Entry& at(const std::string& name) const { return entries_.at(static_cast<size_t>(id(name))); }

    size_t size() const { return entries_.size(); }

    void zero_grad() {
        for (auto& e : entries_)
            for (double& g : e.grad.data) g = 0.0;
    }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Reverse-mode differentiation tape. Values are computed eagerly as ops are
// recorded; nodes are therefore already in topological order. Covers exactly
// the operator set needed by the losses and the toy model.
class Tape {
public:
    // ---- leaves ----
    int leaf(Tensor v, std::string name = "");
    int param(ParamStore& ps, int param_id);
    int param(ParamStore& ps, const std::string& name) { return param(ps, ps.id(name)); }

    // ---- elementwise, same shape ----
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int div(int a, int b);

    int add_scalar(int a, double c);
    int mul_scalar(int a, double c);

    int exp_(int a);
    int log_(int a);
    int sigmoid_(int a);
    int softplus_(int a);
    // sqrt(x^2 + eps), smooth surrogate for |x|
    int abs_smooth(int a, double eps = 1e-12);
    // 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, elementwise
    int smooth_l1(int a);

    // ---- rows of [N, C] ----
    int softmax_rows(int a);
    int log_softmax_rows(int a);
    int col_sum(int a);  // [N, C] -> [C]

    // ---- linear algebra ----
    int matmul(int a, int b);  // [N,K] x [K,M] -> [N,M]
    int transpose(int a);      // [N,M] -> [M,N]

    // ---- structure ----
    int reshape(int a, std::vector<int64_t> shape);
    int slice_cols(int a, int64_t c0, int64_t c1);       // [N,C] -> [N,c1-c0)
    int concat_cols(const std::vector<int>& parts);      // [N,Ci] -> [N,sum Ci]
    int concat_chan(const std::vector<int>& parts);      // [Ci,H,W] -> [sum Ci,H,W]

    // ---- reductions ----
    int sum_all(int a);   // -> [1]
    int mean_all(int a);  // -> [1]

    // ---- fused layers ----
    int layer_norm(int x, int gamma, int beta, double eps = 1e-5);  // [N,D], [D], [D]
    int add_row_bias(int x, int b);   // [N,D] + [D]
    int add_chan_bias(int x, int b);  // [C,H,W] + [C]

    // ---- window ops ----
    int conv2d(int x, int w, int b, int64_t stride, int64_t pad);  // b = -1 for none
    int avg_pool(int x, int64_t k, int64_t stride);                // valid, [C,H,W]
    int bilinear_resize(int x, int64_t oh, int64_t ow);            // [C,H,W]

    // ---- access ----
    const Tensor& val(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
    const Tensor& grad(int id) const { return nodes_.at(static_cast<size_t>(id)).grad; }
    double scalar(int id) const;

    size_t size() const { return nodes_.size(); }

    // Reverse sweep from `output` with an explicit seed gradient. Parameter
    // gradients are accumulated into the owning ParamStore.
    void backward(int output, const Tensor& seed);
    void backward_scalar(int output) { backward(output, Tensor::scalar(1.0)); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::string name;
        int param_id = -1;
        ParamStore* store = nullptr;
        std::function<void(Tape&, int)> back;  // nullptr for leaves
    };

    std::vector<Node> nodes_;
    bool backward_ran_ = false;

    Node& node(int id) { return nodes_.at(static_cast<size_t>(id)); }
    int push(Tensor value, std::function<void(Tape&, int)> back, std::string name = "");
    void check2(int a, int b, const char* op) const;
    [[noreturn]] void fail(const std::string& msg) const { throw std::runtime_error("autodiff: " + msg); }

    friend struct TapeOps;
};

}  // namespace mtscene
