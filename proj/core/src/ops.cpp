#include "s3/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <cblas.h>

#include "s3/errors.hpp"

namespace s3::ops {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

// Gradient sink of a parent, or nullptr if it does not take gradients.
float* sink(const NodePtr& p) { return p->requires_grad ? p->ensure_grad().data() : nullptr; }

void require_2d(const Tensor& x, const char* op) {
    if (x.ndim() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Matrices here are small; threading only adds overhead and run-to-run noise.
const bool kBlasSingleThread = [] {
    openblas_set_num_threads(1);
    return true;
}();

// out[m×n] += a[m×k] · b[k×n]

void gemm_nn(const float* a, const float* b, float* out, std::size_t m, std::size_t k, std::size_t n) {
    if (m == 0 || n == 0 || k == 0) return;
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), 1.0f, a, int(k), b, int(n), 1.0f,
                out, int(n));
}

// out[m×n] += a · bᵀ for a[m×k], b[n×k]
void gemm_nt(const float* a, const float* b, float* out, std::size_t m, std::size_t k, std::size_t n) {
    if (m == 0 || n == 0 || k == 0) return;
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(n), int(k), 1.0f, a, int(k), b, int(k), 1.0f,
                out, int(n));
}

// out[k×n] += aᵀ · g for a[m×k], g[m×n]
void gemm_tn(const float* a, const float* g, float* out, std::size_t m, std::size_t k, std::size_t n) {
    if (m == 0 || n == 0 || k == 0) return;
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(k), int(n), int(m), 1.0f, a, int(k), g, int(n), 1.0f,
                out, int(n));
}

std::vector<float> transposed(const float* a, std::size_t m, std::size_t n) {
    std::vector<float> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [px = x.node_ptr(), dfdx](Node& self) {
        float* gx = sink(px);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * dfdx(px->data[i], self.data[i]);
    });
}

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

void softmax_row(const float* x, float* y, std::size_t n) {
    float mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

}  // namespace

double normal_cdf_value(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(m * n, 0.0f);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return Tensor::make_result(Shape{m, n}, std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr(), m, k, n](Node& self) {
                                   const float* g = self.grad.data();
                                   if (float* ga = sink(pa)) {
                                       // ga += g · bᵀ
                                       gemm_nt(g, pb->data.data(), ga, m, n, k);
                                   }
                                   if (float* gb = sink(pb)) gemm_tn(pa->data.data(), g, gb, m, k, n);
                               });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_bt");
    require_2d(b, "matmul_bt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_bt: inner dimensions disagree " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()) + "ᵀ");
    }
    std::vector<float> out(m * n, 0.0f);
    gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
    return Tensor::make_result(Shape{m, n}, std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr(), m, k, n](Node& self) {
                                   const float* g = self.grad.data();
                                   if (float* ga = sink(pa)) gemm_nn(g, pb->data.data(), ga, m, n, k);
                                   if (float* gb = sink(pb)) gemm_tn(g, pa->data.data(), gb, m, n, k);
                               });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    return Tensor::make_result(Shape{n, m}, transposed(a.data().data(), m, n), {a},
                               [pa = a.node_ptr(), m, n](Node& self) {
                                   float* ga = sink(pa);
                                   if (!ga) return;
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
                               });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    Tensor y = matmul_bt(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr()](Node& self) {
                                   for (const NodePtr& p : {pa, pb}) {
                                       if (float* g = sink(p))
                                           for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                   }
                               });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr()](Node& self) {
                                   if (float* g = sink(pa))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                   if (float* g = sink(pb))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                               });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr()](Node& self) {
                                   if (float* g = sink(pa))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           g[i] += self.grad[i] * pb->data[i];
                                   if (float* g = sink(pb))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           g[i] += self.grad[i] * pa->data[i];
                               });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<float> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [pa = a.node_ptr(), pb = b.node_ptr()](Node& self) {
                                   if (float* g = sink(pa))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           g[i] += self.grad[i] / pb->data[i];
                                   if (float* g = sink(pb))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           g[i] -= self.grad[i] * self.data[i] / pb->data[i];
                               });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.numel() != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                             shape_str(x.shape()));
    }
    std::vector<float> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
    return Tensor::make_result(x.shape(), std::move(out), {x, bias},
                               [px = x.node_ptr(), pb = bias.node_ptr(), m, n](Node& self) {
                                   if (float* g = sink(px))
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                   if (float* g = sink(pb))
                                       for (std::size_t i = 0; i < m; ++i)
                                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                               });
}

Tensor scale(const Tensor& x, float factor) {
    return unary(x, [factor](float v) { return v * factor; }, [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& x, float value) {
    return unary(x, [value](float v) { return v + value; }, [](float, float) { return 1.0f; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

Tensor relu(const Tensor& x) {
    return unary(x, [](float v) { return v > 0.0f ? v : 0.0f; },
                 [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& x) {
    return unary(
        x,
        [](float v) {
            const double d = v;
            return static_cast<float>(0.5 * d * (1.0 + std::erf(d / std::numbers::sqrt2)));
        },
        [](float v, float) {
            const double d = v;
            return static_cast<float>(0.5 * (1.0 + std::erf(d / std::numbers::sqrt2)) + d * normal_pdf(d));
        });
}

Tensor exp(const Tensor& x) {
    return unary(x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary(x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor normal_cdf(const Tensor& x) {
    return unary(
        x, [](float v) { return static_cast<float>(normal_cdf_value(v)); },
        [](float v, float) { return static_cast<float>(normal_pdf(v)); });
}

Tensor activate(const Tensor& x, Activation act) {
    return act == Activation::kGelu ? gelu(x) : relu(x);
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (float v : x.data()) total += v;
    return Tensor::make_result(Shape{}, {static_cast<float>(total)}, {x}, [px = x.node_ptr()](Node& self) {
        if (float* g = sink(px))
            for (std::size_t i = 0; i < px->data.size(); ++i) g[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
    require_2d(x, "sum_axis");
    const std::size_t m = x.dim(0), n = x.dim(1);
    auto xd = x.data();
    if (axis == 0) {
        std::vector<double> acc(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) acc[j] += xd[i * n + j];
        std::vector<float> out(acc.begin(), acc.end());
        return Tensor::make_result(Shape{n}, std::move(out), {x}, [px = x.node_ptr(), m, n](Node& self) {
            if (float* g = sink(px))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
        });
    }
    if (axis == 1 || axis == -1) {
        std::vector<float> out(m);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += xd[i * n + j];
            out[i] = static_cast<float>(acc);
        }
        return Tensor::make_result(Shape{m}, std::move(out), {x}, [px = x.node_ptr(), m, n](Node& self) {
            if (float* g = sink(px))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
        });
    }
    throw DimensionError("sum_axis: axis must be 0 or 1");
}

Tensor mean_axis(const Tensor& x, int axis) {
    require_2d(x, "mean_axis");
    const std::size_t count = axis == 0 ? x.dim(0) : x.dim(1);
    if (count == 0) throw DimensionError("mean_axis over empty axis");
    return scale(sum_axis(x, axis), 1.0f / static_cast<float>(count));
}

Tensor softmax(const Tensor& x, int axis) {
    if (x.ndim() == 2 && axis == 0) return transpose(softmax(transpose(x), 1));
    if (x.ndim() == 2 && axis != 1 && axis != -1) throw DimensionError("softmax: invalid axis");
    if (x.ndim() == 1 && axis != 0 && axis != -1) throw DimensionError("softmax: invalid axis");
    if (x.ndim() != 1 && x.ndim() != 2) throw DimensionError("softmax: expected 1-D or 2-D tensor");
    const std::size_t m = x.rows(), n = x.cols();
    if (n == 0) throw DimensionError("softmax over empty axis");
    std::vector<float> out(m * n);
    auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i) softmax_row(xd.data() + i * n, out.data() + i * n, n);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [px = x.node_ptr(), m, n](Node& self) {
        float* g = sink(px);
        if (!g) return;
        for (std::size_t i = 0; i < m; ++i) {
            const float* y = self.data.data() + i * n;
            const float* gy = self.grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - static_cast<float>(dot));
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    if (x.ndim() != 1 && x.ndim() != 2) throw DimensionError("log_softmax_rows: expected 1-D or 2-D tensor");
    const std::size_t m = x.rows(), n = x.cols();
    if (n == 0) throw DimensionError("log_softmax over empty axis");
    std::vector<float> out(m * n);
    auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        const float* r = xd.data() + i * n;
        const float mx = *std::max_element(r, r + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(r[j] - mx));
        const float lse = mx + static_cast<float>(std::log(total));
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = r[j] - lse;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [px = x.node_ptr(), m, n](Node& self) {
        float* g = sink(px);
        if (!g) return;
        for (std::size_t i = 0; i < m; ++i) {
            const float* y = self.data.data() + i * n;
            const float* gy = self.grad.data() + i * n;
            double gsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) gsum += gy[j];
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += gy[j] - std::exp(y[j]) * static_cast<float>(gsum);
        }
    });
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.ndim() != 1 && x.ndim() != 2) throw DimensionError("l2_normalize: expected 1-D or 2-D tensor");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<float> out(m * n);
    std::vector<float> norms(m);
    auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xd[i * n + j]) * xd[i * n + j];
        const double norm = std::sqrt(ss);
        if (!(norm > 1e-12)) throw DegenerateInputError("l2_normalize: zero-norm vector");
        norms[i] = static_cast<float>(norm);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(xd[i * n + j] / norm);
    }
    return Tensor::make_result(x.shape(), std::move(out), {x},
                               [px = x.node_ptr(), norms = std::move(norms), m, n](Node& self) {
                                   float* g = sink(px);
                                   if (!g) return;
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const float* y = self.data.data() + i * n;
                                       const float* gy = self.grad.data() + i * n;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
                                       for (std::size_t j = 0; j < n; ++j)
                                           g[i * n + j] += (gy[j] - y[j] * static_cast<float>(dot)) / norms[i];
                                   }
                               });
}

Tensor l2_normalize(const Tensor& x) {
    if (x.ndim() != 1) throw DimensionError("l2_normalize: expected 1-D tensor");
    return l2_normalize_rows(x);
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    require_2d(x, "layer_norm_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.numel() != n || bias.numel() != n) throw DimensionError("layer_norm_rows: gain/bias width mismatch");
    std::vector<float> xhat(m * n), out(m * n), inv_std(m);
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        const float* r = xd.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += r[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = static_cast<float>(is);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = static_cast<float>((r[j] - mu) * is);
            out[i * n + j] = gd[j] * xhat[i * n + j] + bd[j];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [px = x.node_ptr(), pg = gain.node_ptr(), pb = bias.node_ptr(), xhat = std::move(xhat),
         inv_std = std::move(inv_std), m, n](Node& self) {
            const float* gy = self.grad.data();
            if (float* gg = sink(pg))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += gy[i * n + j] * xhat[i * n + j];
            if (float* gb = sink(pb))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
            if (float* gx = sink(px)) {
                const float* gam = pg->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = static_cast<double>(gy[i * n + j]) * gam[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * n + j];
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = static_cast<double>(gy[i * n + j]) * gam[j];
                        gx[i * n + j] +=
                            static_cast<float>(inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx));
                    }
                }
            }
        });
}

Tensor entropy_rows(const Tensor& p) {
    if (p.ndim() != 1 && p.ndim() != 2) throw DimensionError("entropy: expected 1-D or 2-D tensor");
    const std::size_t m = p.rows(), n = p.cols();
    std::vector<float> out(m);
    auto pd = p.data();
    for (std::size_t i = 0; i < m; ++i) {
        double h = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = pd[i * n + j];
            if (v < 0.0) throw ArgumentError("entropy: negative probability");
            if (v > 0.0) h -= v * std::log(v);
        }
        out[i] = static_cast<float>(h);
    }
    return Tensor::make_result(Shape{m}, std::move(out), {p}, [pp = p.node_ptr(), m, n](Node& self) {
        float* g = sink(pp);
        if (!g) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const float v = pp->data[i * n + j];
                if (v > 0.0f) g[i * n + j] -= self.grad[i] * (std::log(v) + 1.0f);
            }
    });
}

Tensor entropy(const Tensor& p) {
    if (p.ndim() != 1) throw DimensionError("entropy: expected a 1-D probability vector");
    return sum(entropy_rows(p));
}

Tensor cv_squared(const Tensor& v) {
    if (v.ndim() != 1 || v.numel() == 0) throw DimensionError("cv_squared: expected a nonempty 1-D tensor");
    auto vd = v.data();
    const double n = static_cast<double>(vd.size());
    double m = 0.0;
    for (float x : vd) m += x;
    m /= n;
    if (m == 0.0) throw DegenerateInputError("cv_squared: zero mean");
    double s2 = 0.0;
    for (float x : vd) s2 += (x - m) * (x - m);
    s2 /= n;
    return Tensor::make_result(Shape{}, {static_cast<float>(s2 / (m * m))}, {v},
                               [pv = v.node_ptr(), m, s2, n](Node& self) {
                                   float* g = sink(pv);
                                   if (!g) return;
                                   const double go = self.grad[0];
                                   for (std::size_t j = 0; j < pv->data.size(); ++j) {
                                       const double d = 2.0 * (pv->data[j] - m) / (n * m * m) - 2.0 * s2 / (m * m * m * n);
                                       g[j] += static_cast<float>(go * d);
                                   }
                               });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index) {
    const std::size_t n = x.numel();
    std::vector<float> out(index.size());
    auto xd = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) throw DimensionError("gather: index out of range");
        out[i] = xd[index[i]];
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    Shape shape{idx.size()};
    return Tensor::make_result(std::move(shape), std::move(out), {x},
                               [px = x.node_ptr(), idx = std::move(idx)](Node& self) {
                                   if (float* g = sink(px))
                                       for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
                               });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    if (rows.size() != cols.size()) throw DimensionError("pick: row/col index length mismatch");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m || cols[i] >= n) throw DimensionError("pick: index out of range");
        flat[i] = rows[i] * n + cols[i];
    }
    return gather(x, flat);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
    require_2d(x, "gather_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<float> out(index.size() * n);
    auto xd = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= m) throw DimensionError("gather_rows: index out of range");
        std::copy_n(xd.data() + index[i] * n, n, out.data() + i * n);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    Shape shape{idx.size(), n};
    return Tensor::make_result(std::move(shape), std::move(out), {x},
                               [px = x.node_ptr(), idx = std::move(idx), n](Node& self) {
                                   float* g = sink(px);
                                   if (!g) return;
                                   for (std::size_t i = 0; i < idx.size(); ++i)
                                       for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
                               });
}

Tensor scatter_add_rows(std::size_t n_rows, const std::vector<Tensor>& parts,
                        const std::vector<std::vector<std::size_t>>& index, std::size_t cols) {
    if (parts.size() != index.size()) throw DimensionError("scatter_add_rows: parts/index count mismatch");
    std::vector<float> out(n_rows * cols, 0.0f);
    std::vector<Tensor> live;
    std::vector<std::size_t> live_pos;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (index[p].empty()) continue;
        const Tensor& part = parts[p];
        if (part.ndim() != 2 || part.dim(0) != index[p].size() || part.dim(1) != cols) {
            throw DimensionError("scatter_add_rows: part shape " + shape_str(part.shape()) + " mismatches index");
        }
        auto pd = part.data();
        for (std::size_t i = 0; i < index[p].size(); ++i) {
            const std::size_t r = index[p][i];
            if (r >= n_rows) throw DimensionError("scatter_add_rows: index out of range");
            for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] += pd[i * cols + j];
        }
        live.push_back(part);
        live_pos.push_back(p);
    }
    std::vector<NodePtr> nodes;
    std::vector<std::vector<std::size_t>> idx;
    for (std::size_t q = 0; q < live.size(); ++q) {
        nodes.push_back(live[q].node_ptr());
        idx.push_back(index[live_pos[q]]);
    }
    return Tensor::make_result(Shape{n_rows, cols}, std::move(out), live,
                               [nodes = std::move(nodes), idx = std::move(idx), cols](Node& self) {
                                   for (std::size_t q = 0; q < nodes.size(); ++q) {
                                       float* g = sink(nodes[q]);
                                       if (!g) continue;
                                       for (std::size_t i = 0; i < idx[q].size(); ++i)
                                           for (std::size_t j = 0; j < cols; ++j)
                                               g[i * cols + j] += self.grad[idx[q][i] * cols + j];
                                   }
                               });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
    const std::size_t m = x.rows(), n = x.cols();
    if (w.numel() != m) throw DimensionError("scale_rows: weight count does not match rows");
    std::vector<float> out(m * n);
    auto xd = x.data();
    auto wd = w.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] * wd[i];
    return Tensor::make_result(x.shape(), std::move(out), {x, w},
                               [px = x.node_ptr(), pw = w.node_ptr(), m, n](Node& self) {
                                   if (float* g = sink(px))
                                       for (std::size_t i = 0; i < m; ++i)
                                           for (std::size_t j = 0; j < n; ++j)
                                               g[i * n + j] += self.grad[i * n + j] * pw->data[i];
                                   if (float* g = sink(pw))
                                       for (std::size_t i = 0; i < m; ++i) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j)
                                               acc += static_cast<double>(self.grad[i * n + j]) * px->data[i * n + j];
                                           g[i] += static_cast<float>(acc);
                                       }
                               });
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets) {
    require_2d(x, "segment_mean_rows");
    const std::size_t n = x.dim(1);
    if (offsets.size() < 2 || offsets.back() != x.dim(0)) throw DimensionError("segment_mean_rows: bad offsets");
    const std::size_t s_count = offsets.size() - 1;
    std::vector<float> out(s_count * n, 0.0f);
    auto xd = x.data();
    for (std::size_t s = 0; s < s_count; ++s) {
        const std::size_t len = offsets[s + 1] - offsets[s];
        if (offsets[s + 1] <= offsets[s]) throw DegenerateInputError("segment_mean_rows: empty segment");
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) acc += xd[r * n + j];
            out[s * n + j] = static_cast<float>(acc / static_cast<double>(len));
        }
    }
    std::vector<std::size_t> off(offsets.begin(), offsets.end());
    return Tensor::make_result(Shape{s_count, n}, std::move(out), {x},
                               [px = x.node_ptr(), off = std::move(off), n](Node& self) {
                                   float* g = sink(px);
                                   if (!g) return;
                                   for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                                       const float inv = 1.0f / static_cast<float>(off[s + 1] - off[s]);
                                       for (std::size_t r = off[s]; r < off[s + 1]; ++r)
                                           for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[s * n + j] * inv;
                                   }
                               });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> offsets,
                 std::size_t n_heads) {
    require_2d(q, "attention");
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t rows = q.dim(0), d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by heads");
    if (offsets.size() < 2 || offsets.back() != rows) throw DimensionError("attention: bad offsets");
    const std::size_t dh = d / n_heads;
    const float scale_f = 1.0f / std::sqrt(static_cast<float>(dh));

    auto qd = q.data(), kd = k.data(), vd = v.data();
    std::vector<float> out(rows * d, 0.0f);
    // Attention probabilities per (segment, head), stored row-major L×L.
    std::vector<std::vector<float>> probs;
    probs.reserve((offsets.size() - 1) * n_heads);
    std::vector<float> logits;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const std::size_t r0 = offsets[s], len = offsets[s + 1] - offsets[s];
        if (len == 0) throw DegenerateInputError("attention: empty segment");
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            std::vector<float> p(len * len);
            logits.assign(len * len, 0.0f);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < len; ++j) {
                    float acc = 0.0f;
                    for (std::size_t c = 0; c < dh; ++c) acc += qd[(r0 + i) * d + c0 + c] * kd[(r0 + j) * d + c0 + c];
                    logits[i * len + j] = acc * scale_f;
                }
            for (std::size_t i = 0; i < len; ++i) softmax_row(logits.data() + i * len, p.data() + i * len, len);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < len; ++j) {
                    const float pij = p[i * len + j];
                    for (std::size_t c = 0; c < dh; ++c) out[(r0 + i) * d + c0 + c] += pij * vd[(r0 + j) * d + c0 + c];
                }
            probs.push_back(std::move(p));
        }
    }
    std::vector<std::size_t> off(offsets.begin(), offsets.end());
    return Tensor::make_result(
        Shape{rows, d}, std::move(out), {q, k, v},
        [pq = q.node_ptr(), pk = k.node_ptr(), pv = v.node_ptr(), probs = std::move(probs), off = std::move(off),
         n_heads, d, dh, scale_f](Node& self) {
            float* gq = sink(pq);
            float* gk = sink(pk);
            float* gv = sink(pv);
            const float* go = self.grad.data();
            const float* qd = pq->data.data();
            const float* kd = pk->data.data();
            const float* vd = pv->data.data();
            std::vector<float> dp, ds;
            std::size_t slot = 0;
            for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                const std::size_t r0 = off[s], len = off[s + 1] - off[s];
                for (std::size_t h = 0; h < n_heads; ++h, ++slot) {
                    const std::size_t c0 = h * dh;
                    const std::vector<float>& p = probs[slot];
                    if (gv) {
                        for (std::size_t i = 0; i < len; ++i)
                            for (std::size_t j = 0; j < len; ++j) {
                                const float pij = p[i * len + j];
                                for (std::size_t c = 0; c < dh; ++c)
                                    gv[(r0 + j) * d + c0 + c] += pij * go[(r0 + i) * d + c0 + c];
                            }
                    }
                    if (!gq && !gk) continue;
                    dp.assign(len * len, 0.0f);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < len; ++j) {
                            float acc = 0.0f;
                            for (std::size_t c = 0; c < dh; ++c)
                                acc += go[(r0 + i) * d + c0 + c] * vd[(r0 + j) * d + c0 + c];
                            dp[i * len + j] = acc;
                        }
                    ds.assign(len * len, 0.0f);
                    for (std::size_t i = 0; i < len; ++i) {
                        float dot = 0.0f;
                        for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
                        for (std::size_t j = 0; j < len; ++j)
                            ds[i * len + j] = p[i * len + j] * (dp[i * len + j] - dot) * scale_f;
                    }
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < len; ++j) {
                            const float sij = ds[i * len + j];
                            if (sij == 0.0f) continue;
                            for (std::size_t c = 0; c < dh; ++c) {
                                if (gq) gq[(r0 + i) * d + c0 + c] += sij * kd[(r0 + j) * d + c0 + c];
                                if (gk) gk[(r0 + j) * d + c0 + c] += sij * qd[(r0 + i) * d + c0 + c];
                            }
                        }
                }
            }
        });
}

TopK topk(std::span<const float> x, std::size_t k) {
    if (k < 1 || k > x.size()) {
        throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(x.size()) + "]");
    }
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return x[a] > x[b] || (x[a] == x[b] && a < b); });
    TopK result;
    result.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i : result.indices) result.values.push_back(x[i]);
    return result;
}

TopK topk(const Tensor& x, std::size_t k) {
    if (x.ndim() != 1) throw DimensionError("topk: expected 1-D tensor");
    return topk(x.data(), k);
}

Tensor randn(Shape shape, Rng& rng, float stddev, float mean, bool requires_grad) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = static_cast<float>(rng.normal(mean, stddev));
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace s3::ops
