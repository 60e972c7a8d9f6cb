#include "mtscene/tape.hpp"

#include <algorithm>
#include <cmath>

namespace mtscene {

namespace {

double stable_softplus(double x) {
    // log(1 + e^x) without overflow
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

int Tape::push(Tensor value, std::function<void(Tape&, int)> back, std::string name) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check2(int a, int b, const char* op) const {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
        fail(std::string(op) + ": shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
}

int Tape::leaf(Tensor v, std::string name) { return push(std::move(v), nullptr, std::move(name)); }

int Tape::param(ParamStore& ps, int param_id) {
    const auto& e = ps.at(param_id);
    int id = push(e.value, nullptr, e.name);
    node(id).param_id = param_id;
    node(id).store = &ps;
    return id;
}

double Tape::scalar(int id) const {
    const Tensor& t = val(id);
    if (t.numel() != 1) fail("scalar: node holds " + t.shape_str() + ", not a scalar");
    return t.data[0];
}

// ---------------- elementwise ----------------

int Tape::add(int a, int b) {
    check2(a, b, "add");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    return push(std::move(out), [a, b](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

int Tape::sub(int a, int b) {
    check2(a, b, "sub");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    return push(std::move(out), [a, b](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

int Tape::mul(int a, int b) {
    check2(a, b, "mul");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    return push(std::move(out), [a, b](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        Tensor& ga = t.node(a).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i] * vb[i];
            gb[i] += g[i] * va[i];
        }
    });
}

int Tape::div(int a, int b) {
    check2(a, b, "div");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= tb[i];
    return push(std::move(out), [a, b](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        Tensor& ga = t.node(a).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i] / vb[i];
            gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
        }
    });
}

int Tape::add_scalar(int a, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v += c;
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

int Tape::mul_scalar(int a, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), [a, c](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
}

int Tape::exp_(int a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::exp(v);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.val(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
    });
}

int Tape::log_(int a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::log(v);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.val(a);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / x[i];
    });
}

int Tape::sigmoid_(int a) {
    Tensor out = val(a);
    for (double& v : out.data) v = sigmoid(v);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.val(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

int Tape::softplus_(int a) {
    Tensor out = val(a);
    for (double& v : out.data) v = stable_softplus(v);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.val(a);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * sigmoid(x[i]);
    });
}

int Tape::abs_smooth(int a, double eps) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::sqrt(v * v + eps);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.val(a);
        const Tensor& y = t.val(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * x[i] / y[i];
    });
}

int Tape::smooth_l1(int a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5;
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.val(a);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            double d = std::abs(x[i]) < 1.0 ? x[i] : (x[i] > 0 ? 1.0 : -1.0);
            ga[i] += g[i] * d;
        }
    });
}

// ---------------- row ops on [N, C] ----------------

int Tape::softmax_rows(int a) {
    const Tensor& x = val(a);
    if (x.ndim() != 2) fail("softmax_rows: expected [N,C], got " + x.shape_str());
    int64_t n = x.shape[0], c = x.shape[1];
    Tensor out(x.shape);
    for (int64_t i = 0; i < n; ++i) {
        double m = x.at(i, 0);
        for (int64_t j = 1; j < c; ++j) m = std::max(m, x.at(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += (out.at(i, j) = std::exp(x.at(i, j) - m));
        for (int64_t j = 0; j < c; ++j) out.at(i, j) /= s;
    }
    return push(std::move(out), [a, n, c](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.val(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int64_t j = 0; j < c; ++j) ga.at(i, j) += (g.at(i, j) - dot) * y.at(i, j);
        }
    });
}

int Tape::log_softmax_rows(int a) {
    const Tensor& x = val(a);
    if (x.ndim() != 2) fail("log_softmax_rows: expected [N,C], got " + x.shape_str());
    int64_t n = x.shape[0], c = x.shape[1];
    Tensor out(x.shape);
    for (int64_t i = 0; i < n; ++i) {
        double m = x.at(i, 0);
        for (int64_t j = 1; j < c; ++j) m = std::max(m, x.at(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += std::exp(x.at(i, j) - m);
        double lse = m + std::log(s);
        for (int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) - lse;
    }
    return push(std::move(out), [a, n, c](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.val(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < c; ++j) s += g.at(i, j);
            for (int64_t j = 0; j < c; ++j) ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * s;
        }
    });
}

int Tape::col_sum(int a) {
    const Tensor& x = val(a);
    if (x.ndim() != 2) fail("col_sum: expected [N,C], got " + x.shape_str());
    int64_t n = x.shape[0], c = x.shape[1];
    Tensor out({c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) out[j] += x.at(i, j);
    return push(std::move(out), [a, n, c](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j) ga.at(i, j) += g[j];
    });
}

// ---------------- linear algebra ----------------

int Tape::matmul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[0])
        fail("matmul: incompatible " + A.shape_str() + " x " + B.shape_str());
    int64_t n = A.shape[0], k = A.shape[1], m = B.shape[1];
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = &A.data[static_cast<size_t>(i * k)];
        double* orow = &out.data[static_cast<size_t>(i * m)];
        for (int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = &B.data[static_cast<size_t>(p * m)];
            for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return push(std::move(out), [a, b, n, k, m](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        Tensor& ga = t.node(a).grad;
        Tensor& gb = t.node(b).grad;
        // dA = g * B^T
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = &g.data[static_cast<size_t>(i * m)];
            double* garow = &ga.data[static_cast<size_t>(i * k)];
            for (int64_t p = 0; p < k; ++p) {
                const double* brow = &B.data[static_cast<size_t>(p * m)];
                double acc = 0.0;
                for (int64_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                garow[p] += acc;
            }
        }
        // dB = A^T * g
        for (int64_t p = 0; p < k; ++p) {
            double* gbrow = &gb.data[static_cast<size_t>(p * m)];
            for (int64_t i = 0; i < n; ++i) {
                double av = A.data[static_cast<size_t>(i * k + p)];
                const double* grow = &g.data[static_cast<size_t>(i * m)];
                for (int64_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
            }
        }
    });
}

int Tape::transpose(int a) {
    const Tensor& x = val(a);
    if (x.ndim() != 2) fail("transpose: expected 2-D, got " + x.shape_str());
    int64_t n = x.shape[0], m = x.shape[1];
    Tensor out({m, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.at(j, i) = x.at(i, j);
    return push(std::move(out), [a, n, m](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) ga.at(i, j) += g.at(j, i);
    });
}

// ---------------- structure ----------------

int Tape::reshape(int a, std::vector<int64_t> shape) {
    const Tensor& x = val(a);
    if (Tensor::numel_of(shape) != x.numel())
        fail("reshape: cannot view " + x.shape_str() + " as " + Tensor::shape_str(shape));
    Tensor out(std::move(shape), x.data);
    return push(std::move(out), [a](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

int Tape::slice_cols(int a, int64_t c0, int64_t c1) {
    const Tensor& x = val(a);
    if (x.ndim() != 2 || c0 < 0 || c1 > x.shape[1] || c0 >= c1)
        fail("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " + x.shape_str());
    int64_t n = x.shape[0];
    Tensor out({n, c1 - c0});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = x.at(i, j);
    return push(std::move(out), [a, c0, c1, n](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = c0; j < c1; ++j) ga.at(i, j) += g.at(i, j - c0);
    });
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) fail("concat_cols: no inputs");
    int64_t n = val(parts[0]).shape[0];
    int64_t ctot = 0;
    for (int p : parts) {
        const Tensor& x = val(p);
        if (x.ndim() != 2 || x.shape[0] != n) fail("concat_cols: incompatible part " + x.shape_str());
        ctot += x.shape[1];
    }
    Tensor out({n, ctot});
    int64_t off = 0;
    for (int p : parts) {
        const Tensor& x = val(p);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < x.shape[1]; ++j) out.at(i, off + j) = x.at(i, j);
        off += x.shape[1];
    }
    std::vector<int> ps = parts;
    return push(std::move(out), [ps, n](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        int64_t off = 0;
        for (int p : ps) {
            Tensor& gp = t.node(p).grad;
            int64_t c = gp.shape[1];
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j) gp.at(i, j) += g.at(i, off + j);
            off += c;
        }
    });
}

int Tape::concat_chan(const std::vector<int>& parts) {
    if (parts.empty()) fail("concat_chan: no inputs");
    const Tensor& first = val(parts[0]);
    if (first.ndim() != 3) fail("concat_chan: expected [C,H,W], got " + first.shape_str());
    int64_t h = first.shape[1], w = first.shape[2], ctot = 0;
    for (int p : parts) {
        const Tensor& x = val(p);
        if (x.ndim() != 3 || x.shape[1] != h || x.shape[2] != w)
            fail("concat_chan: incompatible part " + x.shape_str());
        ctot += x.shape[0];
    }
    Tensor out({ctot, h, w});
    size_t off = 0;
    for (int p : parts) {
        const Tensor& x = val(p);
        std::copy(x.data.begin(), x.data.end(), out.data.begin() + static_cast<long>(off));
        off += x.data.size();
    }
    std::vector<int> ps = parts;
    return push(std::move(out), [ps](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        size_t off = 0;
        for (int p : ps) {
            Tensor& gp = t.node(p).grad;
            for (size_t i = 0; i < gp.data.size(); ++i) gp.data[i] += g.data[off + i];
            off += gp.data.size();
        }
    });
}

// ---------------- reductions ----------------

int Tape::sum_all(int a) {
    const Tensor& x = val(a);
    double s = 0.0;
    for (double v : x.data) s += v;
    return push(Tensor::scalar(s), [a](Tape& t, int self) {
        double g = t.grad(self)[0];
        Tensor& ga = t.node(a).grad;
        for (double& v : ga.data) v += g;
    });
}

int Tape::mean_all(int a) {
    const Tensor& x = val(a);
    double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data) s += v;
    return push(Tensor::scalar(s * inv), [a, inv](Tape& t, int self) {
        double g = t.grad(self)[0] * inv;
        Tensor& ga = t.node(a).grad;
        for (double& v : ga.data) v += g;
    });
}

// ---------------- fused layers ----------------

int Tape::layer_norm(int x, int gamma, int beta, double eps) {
    const Tensor& X = val(x);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    if (X.ndim() != 2) fail("layer_norm: expected [N,D], got " + X.shape_str());
    int64_t n = X.shape[0], d = X.shape[1];
    if (G.numel() != d || B.numel() != d) fail("layer_norm: gamma/beta size mismatch");
    Tensor out(X.shape);
    for (int64_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += X.at(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = X.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double istd = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = (X.at(i, j) - mu) * istd * G[j] + B[j];
    }
    return push(std::move(out), [x, gamma, beta, eps, n, d](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& X = t.val(x);
        const Tensor& G = t.val(gamma);
        Tensor& gx = t.node(x).grad;
        Tensor& gg = t.node(gamma).grad;
        Tensor& gb = t.node(beta).grad;
        std::vector<double> xhat(static_cast<size_t>(d));
        for (int64_t i = 0; i < n; ++i) {
            double mu = 0.0;
            for (int64_t j = 0; j < d; ++j) mu += X.at(i, j);
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                double c = X.at(i, j) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            double istd = 1.0 / std::sqrt(var + eps);
            double m1 = 0.0, m2 = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                xhat[static_cast<size_t>(j)] = (X.at(i, j) - mu) * istd;
                double dxh = g.at(i, j) * G[j];
                m1 += dxh;
                m2 += dxh * xhat[static_cast<size_t>(j)];
                gg[j] += g.at(i, j) * xhat[static_cast<size_t>(j)];
                gb[j] += g.at(i, j);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j) {
                double dxh = g.at(i, j) * G[j];
                gx.at(i, j) += istd * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
            }
        }
    });
}

int Tape::add_row_bias(int x, int b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (X.ndim() != 2 || B.numel() != X.shape[1]) fail("add_row_bias: " + X.shape_str() + " + " + B.shape_str());
    int64_t n = X.shape[0], d = X.shape[1];
    Tensor out = X;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(i, j) += B[j];
    return push(std::move(out), [x, b, n, d](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.node(x).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                gx.at(i, j) += g.at(i, j);
                gb[j] += g.at(i, j);
            }
    });
}

int Tape::add_chan_bias(int x, int b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (X.ndim() != 3 || B.numel() != X.shape[0]) fail("add_chan_bias: " + X.shape_str() + " + " + B.shape_str());
    int64_t c = X.shape[0], hw = X.shape[1] * X.shape[2];
    Tensor out = X;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i) out.data[static_cast<size_t>(ch * hw + i)] += B[ch];
    return push(std::move(out), [x, b, c, hw](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.node(x).grad;
        Tensor& gb = t.node(b).grad;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < hw; ++i) {
                gx.data[static_cast<size_t>(ch * hw + i)] += g.data[static_cast<size_t>(ch * hw + i)];
                gb[ch] += g.data[static_cast<size_t>(ch * hw + i)];
            }
    });
}

// ---------------- window ops ----------------

int Tape::conv2d(int x, int w, int b, int64_t stride, int64_t pad) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (X.ndim() != 3 || W.ndim() != 4 || W.shape[1] != X.shape[0])
        fail("conv2d: incompatible input " + X.shape_str() + " and kernel " + W.shape_str());
    int64_t cin = X.shape[0], h = X.shape[1], wid = X.shape[2];
    int64_t cout = W.shape[0], kh = W.shape[2], kw = W.shape[3];
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wid + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) fail("conv2d: kernel larger than padded input");
    const double* bias = b >= 0 ? val(b).data.data() : nullptr;
    if (bias && val(b).numel() != cout) fail("conv2d: bias size mismatch");
    Tensor out({cout, oh, ow});
    for (int64_t oc = 0; oc < cout; ++oc)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                double acc = bias ? bias[oc] : 0.0;
                for (int64_t ic = 0; ic < cin; ++ic)
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wid) continue;
                            acc += X.at(ic, iy, ix) * W.data[static_cast<size_t>(((oc * cin + ic) * kh + ky) * kw + kx)];
                        }
                    }
                out.at(oc, oy, ox) = acc;
            }
    return push(std::move(out), [x, w, b, stride, pad, cin, h, wid, cout, kh, kw, oh, ow](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& X = t.val(x);
        const Tensor& W = t.val(w);
        Tensor& gx = t.node(x).grad;
        Tensor& gw = t.node(w).grad;
        for (int64_t oc = 0; oc < cout; ++oc)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double go = g.at(oc, oy, ox);
                    if (go == 0.0) continue;
                    for (int64_t ic = 0; ic < cin; ++ic)
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wid) continue;
                                size_t wi = static_cast<size_t>(((oc * cin + ic) * kh + ky) * kw + kx);
                                gx.at(ic, iy, ix) += go * W.data[wi];
                                gw.data[wi] += go * X.at(ic, iy, ix);
                            }
                        }
                }
        if (b >= 0) {
            Tensor& gb = t.node(b).grad;
            for (int64_t oc = 0; oc < cout; ++oc) {
                double acc = 0.0;
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox) acc += g.at(oc, oy, ox);
                gb[oc] += acc;
            }
        }
    });
}

int Tape::avg_pool(int x, int64_t k, int64_t stride) {
    const Tensor& X = val(x);
    if (X.ndim() != 3) fail("avg_pool: expected [C,H,W], got " + X.shape_str());
    int64_t c = X.shape[0], h = X.shape[1], w = X.shape[2];
    if (k > h || k > w) fail("avg_pool: window " + std::to_string(k) + " larger than input " + X.shape_str());
    int64_t oh = (h - k) / stride + 1;
    int64_t ow = (w - k) / stride + 1;
    double inv = 1.0 / static_cast<double>(k * k);
    Tensor out({c, oh, ow});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kx = 0; kx < k; ++kx) acc += X.at(ch, oy * stride + ky, ox * stride + kx);
                out.at(ch, oy, ox) = acc * inv;
            }
    return push(std::move(out), [x, k, stride, c, oh, ow, inv](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.node(x).grad;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double go = g.at(ch, oy, ox) * inv;
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx) gx.at(ch, oy * stride + ky, ox * stride + kx) += go;
                }
    });
}

int Tape::bilinear_resize(int x, int64_t oh, int64_t ow) {
    const Tensor& X = val(x);
    if (X.ndim() != 3) fail("bilinear_resize: expected [C,H,W], got " + X.shape_str());
    if (oh <= 0 || ow <= 0) fail("bilinear_resize: non-positive output extents");
    int64_t c = X.shape[0], h = X.shape[1], w = X.shape[2];
    double sy = static_cast<double>(h) / static_cast<double>(oh);
    double sx = static_cast<double>(w) / static_cast<double>(ow);
    // per output pixel: 4 taps (y0,x0,wy,wx)
    std::vector<int64_t> y0v(static_cast<size_t>(oh)), y1v(static_cast<size_t>(oh));
    std::vector<double> wyv(static_cast<size_t>(oh));
    for (int64_t oy = 0; oy < oh; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(h - 1)));
        int64_t y0 = static_cast<int64_t>(fy);
        y0v[static_cast<size_t>(oy)] = y0;
        y1v[static_cast<size_t>(oy)] = std::min(y0 + 1, h - 1);
        wyv[static_cast<size_t>(oy)] = fy - static_cast<double>(y0);
    }
    std::vector<int64_t> x0v(static_cast<size_t>(ow)), x1v(static_cast<size_t>(ow));
    std::vector<double> wxv(static_cast<size_t>(ow));
    for (int64_t ox = 0; ox < ow; ++ox) {
        double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
        fx = std::max(0.0, std::min(fx, static_cast<double>(w - 1)));
        int64_t x0 = static_cast<int64_t>(fx);
        x0v[static_cast<size_t>(ox)] = x0;
        x1v[static_cast<size_t>(ox)] = std::min(x0 + 1, w - 1);
        wxv[static_cast<size_t>(ox)] = fx - static_cast<double>(x0);
    }
    Tensor out({c, oh, ow});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy) {
            int64_t y0 = y0v[static_cast<size_t>(oy)], y1 = y1v[static_cast<size_t>(oy)];
            double wy = wyv[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < ow; ++ox) {
                int64_t x0 = x0v[static_cast<size_t>(ox)], x1 = x1v[static_cast<size_t>(ox)];
                double wx = wxv[static_cast<size_t>(ox)];
                out.at(ch, oy, ox) = (1 - wy) * ((1 - wx) * X.at(ch, y0, x0) + wx * X.at(ch, y0, x1)) +
                                     wy * ((1 - wx) * X.at(ch, y1, x0) + wx * X.at(ch, y1, x1));
            }
        }
    return push(std::move(out), [x, c, oh, ow, y0v, y1v, wyv, x0v, x1v, wxv](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.node(x).grad;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < oh; ++oy) {
                int64_t y0 = y0v[static_cast<size_t>(oy)], y1 = y1v[static_cast<size_t>(oy)];
                double wy = wyv[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < ow; ++ox) {
                    int64_t x0 = x0v[static_cast<size_t>(ox)], x1 = x1v[static_cast<size_t>(ox)];
                    double wx = wxv[static_cast<size_t>(ox)];
                    double go = g.at(ch, oy, ox);
                    gx.at(ch, y0, x0) += go * (1 - wy) * (1 - wx);
                    gx.at(ch, y0, x1) += go * (1 - wy) * wx;
                    gx.at(ch, y1, x0) += go * wy * (1 - wx);
                    gx.at(ch, y1, x1) += go * wy * wx;
                }
            }
    });
}

// ---------------- backward ----------------

void Tape::backward(int output, const Tensor& seed) {
    if (nodes_.empty()) fail("backward: no forward pass has been recorded");
    if (output < 0 || output >= static_cast<int>(nodes_.size())) fail("backward: invalid output node");
    if (!seed.same_shape(val(output)))
        fail("backward: seed shape " + seed.shape_str() + " does not match output " + val(output).shape_str());
    // fixed accumulation order: single reverse sweep over creation order
    for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape);
    node(output).grad = seed;
    for (int id = output; id >= 0; --id) {
        Node& n = node(id);
        if (n.back) n.back(*this, id);
    }
    for (auto& n : nodes_) {
        if (n.param_id >= 0 && n.store) {
            auto& e = n.store->at(n.param_id);
            if (!e.trainable) continue;
            for (int64_t i = 0; i < n.grad.numel(); ++i) e.grad[i] += n.grad[i];
        }
    }
    backward_ran_ = true;
}

}  // namespace mtscene
