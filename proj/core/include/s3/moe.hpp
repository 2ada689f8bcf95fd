#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "s3/ops.hpp"
#include "s3/rng.hpp"
#include "s3/tensor.hpp"

namespace s3 {

/// Shape of one MoE layer. The dense FFN hidden width is split into
/// `granularity` shards (d_expert = d_ffn / χ) and the expert pool holds
/// `expansion` dense-FFN equivalents, so n_experts = χ·ρ.
struct MoEConfig {
    std::size_t d_model = 128;
    std::size_t d_ffn = 0;        // 0 means 4·d_model
    std::size_t granularity = 8;  // χ
    std::size_t expansion = 8;    // ρ
    std::size_t top_k = 0;        // 0 means k = χ
    ops::Activation activation = ops::Activation::kGelu;

    std::size_t ffn_width() const { return d_ffn == 0 ? 4 * d_model : d_ffn; }
    std::size_t n_experts() const { return granularity * expansion; }
    std::size_t expert_width() const { return ffn_width() / granularity; }
    std::size_t k() const { return top_k == 0 ? granularity : top_k; }

    /// Throws ConfigError when the invariants do not hold.
    void validate() const;
};

struct ParamCount {
    std::size_t weights = 0;
    std::size_t biases = 0;
    std::size_t total() const { return weights + biases; }
    ParamCount& operator+=(const ParamCount& o) {
        weights += o.weights;
        biases += o.biases;
        return *this;
    }
    ParamCount operator*(std::size_t n) const { return {weights * n, biases * n}; }
    bool operator==(const ParamCount&) const = default;
};

ParamCount dense_ffn_params(const MoEConfig& cfg);
ParamCount expert_params(const MoEConfig& cfg);
/// All experts of one layer, router excluded.
ParamCount moe_expert_params(const MoEConfig& cfg);
ParamCount router_params(const MoEConfig& cfg);
/// Parameters touched per token by k routed experts.
ParamCount active_params_per_token(const MoEConfig& cfg, std::size_t k);

/// Coarse grouping used by the stage freeze policies.
enum class ParamGroup { kInputProjection, kAttention, kExperts, kRouter };
const char* param_group_name(ParamGroup g);

struct NamedParam {
    std::string name;
    Tensor tensor;
    ParamGroup group;
};

/// Visits parameter slots by reference so callers can replace them.
using ParamVisitor = std::function<void(const std::string& name, Tensor& t, ParamGroup group)>;

/// W2·φ(W1·x + b1) + b2 applied to a single token [d_model] or to rows [T×d_model].
Tensor ffn_forward(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                   ops::Activation act);

struct Expert {
    Tensor w1;  // d_expert × d_model
    Tensor b1;  // d_expert
    Tensor w2;  // d_model × d_expert
    Tensor b2;  // d_model

    static Expert init(std::size_t d_model, std::size_t d_expert, Rng& rng);
    Tensor forward(const Tensor& x, ops::Activation act) const { return ffn_forward(x, w1, b1, w2, b2, act); }
    std::size_t param_count() const { return w1.numel() + b1.numel() + w2.numel() + b2.numel(); }
};

struct Router {
    Tensor wg;  // n_experts × d_model

    static Router init(std::size_t n_experts, std::size_t d_model, Rng& rng);
    std::size_t n_experts() const { return wg.dim(0); }
    /// W_g·x for a token [d_model] → [n_experts], or rows [T×d_model] → [T×n_experts].
    Tensor logits(const Tensor& x) const;
};

/// Routing decision for one token in one MoE layer.
struct RoutingRecord {
    std::size_t sample = 0;
    std::size_t position = 0;
    std::size_t layer = 0;
    std::vector<float> scores;             // softmax(W_g x) over all experts
    std::vector<std::size_t> selected;     // top-k, descending
    std::vector<float> weights;            // routing softmax at `selected`, not renormalized
    std::vector<unsigned char> retained;   // per slot; 0 when pruned

    double retained_weight(std::size_t expert) const;
};

/// Routes one token. With `noise_sigma > 0` the logits are perturbed by
/// N(0, σ²) draws from `rng` and both selection and weights use the noisy
/// softmax; `scores` always holds the clean softmax.
RoutingRecord route(const Tensor& x, const Router& router, std::size_t k, float noise_sigma = 0.0f,
                    Rng* rng = nullptr);

/// Σ over retained selected slots of weight·expert(x). `record.retained`
/// (if non-empty) masks slots; with everything masked the result is zero.
Tensor moe_forward(const Tensor& x, const std::vector<Expert>& experts, const RoutingRecord& record,
                   ops::Activation act = ops::Activation::kGelu);

/// Returns false for (token row, expert) pairs that must be skipped.
using PairFilter = std::function<bool(std::size_t row, std::size_t expert)>;

/// Routing noise for training-time forwards.
struct RoutingNoise {
    Rng* rng = nullptr;
    float sigma = 0.0f;  // ≤ 0 disables noise
};

class MoELayer {
public:
    struct Output {
        Tensor y;             // [T×d_model]
        Tensor logits;        // clean W_g x, [T×N]
        Tensor noisy_logits;  // undefined when no noise was applied
        Tensor probs;         // softmax(logits), [T×N]
        std::vector<RoutingRecord> records;
    };

    MoELayer() = default;
    MoELayer(const MoEConfig& cfg, Rng& rng);

    /// Forward over token rows. `offsets` delimits samples so records carry
    /// (sample, position) ids.
    Output forward(const Tensor& x, std::span<const std::size_t> offsets, std::size_t layer_id,
                   const RoutingNoise& noise = {}, const PairFilter* filter = nullptr) const;

    const MoEConfig& config() const { return cfg_; }
    Router& router() { return router_; }
    const Router& router() const { return router_; }
    std::vector<Expert>& experts() { return experts_; }
    const std::vector<Expert>& experts() const { return experts_; }

    void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

private:
    MoEConfig cfg_;
    Router router_;
    std::vector<Expert> experts_;
};

}  // namespace s3
