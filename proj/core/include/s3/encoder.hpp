#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "s3/moe.hpp"
#include "s3/tensor.hpp"

namespace s3 {

struct EncoderConfig {
    std::size_t d_in = 32;
    std::size_t n_layers = 5;
    std::size_t n_heads = 4;
    MoEConfig moe;           // moe.d_model is the model width
    bool mean_pool = true;   // false pools the first position only
    bool layer_norm = true;  // false skips both pre-norms (tests only)

    std::size_t d_model() const { return moe.d_model; }
    void validate() const;
};

/// (layer, token row, expert) → keep? Applied inside every MoE layer.
using LayerPairFilter = std::function<bool(std::size_t layer, std::size_t row, std::size_t expert)>;

struct EncodeOptions {
    RoutingNoise noise;                       // training-time routing noise
    Rng* jitter_rng = nullptr;                // input jitter, used when jitter > 0
    float jitter = 0.0f;
    const LayerPairFilter* filter = nullptr;  // pruning
};

struct SampleEmbedding {
    std::vector<float> z;  // unit norm
    std::size_t modality = 0;
    std::vector<RoutingRecord> routing;  // all layers, all tokens
};

/// Output of a batched forward. Rows of `tokens` are the concatenated
/// samples; offsets[b]..offsets[b+1] belong to sample b.
struct EncodedBatch {
    Tensor z;  // [B×d_model], rows unit norm
    std::vector<std::size_t> offsets;
    std::vector<MoELayer::Output> layers;
    std::size_t modality = 0;

    std::size_t batch_size() const { return offsets.size() - 1; }
    SampleEmbedding sample(std::size_t b) const;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderConfig& cfg, std::size_t modality, Rng& rng);

    /// Each sample is a [T×d_in] token matrix with T ≥ 1.
    EncodedBatch encode(const std::vector<Tensor>& samples, const EncodeOptions& opts = {}) const;
    SampleEmbedding encode_one(const Tensor& tokens, const EncodeOptions& opts = {}) const;

    const EncoderConfig& config() const { return cfg_; }
    std::size_t modality() const { return modality_; }
    std::vector<MoELayer>& moe_layers() { return moe_; }
    const std::vector<MoELayer>& moe_layers() const { return moe_; }

    void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
    std::vector<NamedParam> parameters(const std::string& prefix = "");
    ParamCount count(ParamGroup g) const;
    ParamCount total_count() const;
    /// Independent copy with freshly allocated parameter storage.
    Encoder deep_copy() const;

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
    };

    EncoderConfig cfg_;
    std::size_t modality_ = 0;
    Tensor proj_w, proj_b;
    std::vector<Block> blocks_;
    std::vector<MoELayer> moe_;
};

/// Per-expert routing mass of one sample and the experts above ε.
struct ConceptActivation {
    std::vector<std::size_t> active_set;
    std::vector<double> masses;
};

/// mass_c = mean over (token, layer) records of the retained weight routed
/// to expert c.
ConceptActivation active_concepts(const SampleEmbedding& emb, double epsilon);

/// Jensen–Shannon divergence (nats) between the two modalities' histograms
/// of mass_c over the samples where c is active; 16 bins on [0, 1].
double dsc_divergence(const std::vector<ConceptActivation>& acts_m1, const std::vector<ConceptActivation>& acts_m2,
                      std::size_t concept_id);

/// Sinusoidal position code, [d_model].
std::vector<float> positional_encoding(std::size_t position, std::size_t d_model);

}  // namespace s3
