#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "s3/rng.hpp"
#include "s3/tensor.hpp"

/// Differentiable tensor operations.
///
/// Everything is 1-D or 2-D. The only implicit broadcast is the per-row bias
/// of add_bias; scale_rows is an explicit per-row multiplier.
namespace s3::ops {

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose in the graph.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x · Wᵀ + b for x [m×in], W [out×in], b [out] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// Standard-normal CDF Φ.
Tensor normal_cdf(const Tensor& x);

enum class Activation { kGelu, kRelu };
Tensor activate(const Tensor& x, Activation act);

// Reductions
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduce a 2-D tensor along `axis` (0: over rows → [cols], 1: over cols → [rows]).
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);

// Normalizations
/// Softmax of a 1-D tensor, or of a 2-D tensor along `axis`.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax_rows(const Tensor& x);
Tensor l2_normalize(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
/// Shannon entropy (nats, 0·log 0 = 0) of a probability vector.
Tensor entropy(const Tensor& p);
/// Per-row entropies of a 2-D probability matrix → [rows].
Tensor entropy_rows(const Tensor& p);
/// Squared coefficient of variation var(v)/mean(v)², population variance.
Tensor cv_squared(const Tensor& v);

// Indexing
Tensor gather(const Tensor& x, std::span<const std::size_t> index);
/// Elements x[rows[i], cols[i]] → 1-D.
Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// Sum of row-blocks scattered into an [n_rows × cols] zero matrix:
/// out[index[p][i]] += parts[p][i].
Tensor scatter_add_rows(std::size_t n_rows, const std::vector<Tensor>& parts,
                        const std::vector<std::vector<std::size_t>>& index, std::size_t cols);
/// Multiplies row i of x by w[i].
Tensor scale_rows(const Tensor& x, const Tensor& w);
/// Mean over consecutive row segments [offsets[s], offsets[s+1]).
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets);

/// Scaled dot-product attention applied independently to each row segment
/// (sample) and each head: softmax(Q Kᵀ / √d_head) V.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> offsets,
                 std::size_t n_heads);

// Non-differentiable helpers
struct TopK {
    std::vector<std::size_t> indices;
    std::vector<float> values;
};
/// Top-k of a 1-D tensor, values descending, ties to the lowest index.
TopK topk(const Tensor& x, std::size_t k);
TopK topk(std::span<const float> x, std::size_t k);

/// Tensor of i.i.d. N(mean, stddev²) draws.
Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, float mean = 0.0f, bool requires_grad = false);

double normal_cdf_value(double x);

}  // namespace s3::ops
