#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "s3/moe.hpp"
#include "s3/tensor.hpp"

namespace s3 {

struct LossWeights {
    // Specialization
    float lambda_rep = 1.0f;
    float lambda_dsc = 1.0f;
    float lambda_aux = 0.01f;
    // Selection; α of the selection objective is lambda_min / lambda_suff
    float lambda_suff = 1.0f;
    float lambda_min = 0.1f;
    // Auxiliary routing terms inside L_aux
    float lambda_imp = 1.0f;
    float lambda_load = 1.0f;
    float lambda_local = 0.1f;
    float lambda_global = 0.1f;
    float tau = 0.1f;

    void validate() const;
};

/// Unit-norm embeddings of B paired samples. The *_view tensors are a second
/// stochastic forward of the same inputs, used by L_rep; when undefined the
/// primary tensors stand in.
struct EmbeddingBatch {
    Tensor z1, z2;
    Tensor z1_view, z2_view;
    std::vector<std::size_t> labels;  // empty when unlabeled

    std::size_t size() const { return z1.rows(); }
};

/// Routing tensors of one MoE layer, as produced by MoELayer::forward.
struct RoutingTrace {
    Tensor logits;        // [T×N]
    Tensor noisy_logits;  // may be undefined
    Tensor probs;         // softmax(logits)
    std::size_t k = 1;
    float sigma = 0.0f;   // noise scale used for the load estimator
};

struct LossBreakdown {
    Tensor total;
    std::vector<std::pair<std::string, double>> terms;

    double term(const std::string& name) const;
};

/// −mean_i log softmax_j(⟨src_i, dst_j⟩/τ)[i]; the denominator includes i.
Tensor info_nce(const Tensor& src, const Tensor& dst, float tau);
Tensor l_rep(const EmbeddingBatch& batch, float tau);
Tensor l_dsc(const EmbeddingBatch& batch, float tau);

/// Supervised contrastive loss. With `intra_modal` the anchor itself is not
/// a positive. Anchors with no positive are dropped with a warning and
/// counted in `*skipped` when given.
Tensor sup_con(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& labels, float tau,
               bool intra_modal, std::size_t* skipped = nullptr);
Tensor l_suff(const EmbeddingBatch& batch, float tau);

/// −mean_i ⟨src_i, μ̂_{y_i}⟩ where μ̂_y is the normalized mean of dst rows labelled y.
Tensor compactness(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& labels);
Tensor l_min(const EmbeddingBatch& batch);

/// κ·A_d(κ)·(1 − ⟨μ_x, μ̂_y⟩) for unit vectors.
double vmf_kl(const std::vector<double>& mu_x, const std::vector<double>& mu_y_hat, double kappa, double a_d_kappa);

/// CV² of the per-expert summed softmax scores; probs is [T×N].
Tensor importance_loss(const Tensor& probs);
/// CV² of the smooth load estimate Σ_t Φ((logit − threshold_k)/σ). Thresholds
/// come from `noisy_logits` (the clean logits when undefined).
Tensor load_loss(const Tensor& logits, const Tensor& noisy_logits, std::size_t k, float sigma);
Tensor local_entropy_loss(const Tensor& probs);
Tensor global_entropy_loss(const Tensor& probs);

/// [T×N] constant score matrix from records (for monitors and oracles).
Tensor scores_tensor(const std::vector<RoutingRecord>& records);

/// L_aux averaged over the traced layers.
LossBreakdown aux_loss(const std::vector<RoutingTrace>& layers, const LossWeights& w);
LossBreakdown l_special(const EmbeddingBatch& batch, const std::vector<RoutingTrace>& routing, const LossWeights& w);
LossBreakdown l_select(const EmbeddingBatch& batch, const LossWeights& w);

}  // namespace s3
