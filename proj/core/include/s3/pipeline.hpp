#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "s3/analysis.hpp"
#include "s3/config.hpp"
#include "s3/losses.hpp"
#include "s3/model.hpp"
#include "s3/synthdata.hpp"

namespace s3 {

/// SGD with heavy-ball momentum and optional global-norm clipping.
class MomentumSgd {
public:
    MomentumSgd(std::vector<Tensor> params, float lr, float momentum, float clip = 0.0f);
    void zero_grad();
    /// Applies one update; returns the gradient norm before clipping.
    double step();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    float lr_, momentum_, clip_;
};

/// Per-step CSV log: step, epoch, then one column per term.
struct TrainLog {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    void append(std::size_t step, std::size_t epoch, const std::vector<std::pair<std::string, double>>& terms);
    std::vector<double> column(const std::string& name) const;
    std::string csv() const;
};

/// Shuffled consecutive batches covering all n indices; the last may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng);

/// Round-robin over classes so every class present in a batch has at least
/// two members. Throws PreconditionError when some class has fewer than two
/// samples overall.
std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& labels,
                                                         std::size_t batch_size, Rng& rng);

/// Token matrices of modality m (0 or 1) for the given samples.
std::vector<Tensor> modality_inputs(const Dataset& data, const std::vector<std::size_t>& idx, std::size_t m);

float effective_noise_sigma(const StageConfig& cfg, const EncoderConfig& enc);

/// L_special of one batch: two stochastic forwards per encoder (routing
/// noise, plus input jitter on the second view). Builds the graph.
LossBreakdown specialization_loss(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                  const StageConfig& cfg, Rng& noise_rng);

/// L_select of one labelled batch with deterministic routing.
LossBreakdown selection_loss(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                             const StageConfig& cfg, std::array<EncodedBatch, 2>* forwards = nullptr);

/// Updates every parameter. Batches come from Rng(cfg.seed).derive(1) and
/// routing noise from Rng(cfg.seed).derive(2). A non-finite loss aborts with
/// NumericError naming the step.
TrainLog train_specialization(S3Model& model, const Dataset& data, const StageConfig& cfg);

struct SelectionResult {
    TrainLog log;
    EntropyMonitor entropy;
};

/// Updates router weights only; every other parameter is left byte-identical.
SelectionResult train_selection(S3Model& model, const Dataset& data, const StageConfig& cfg);

// Sparsification

struct PairId {
    std::uint32_t encoder = 0;
    std::uint32_t layer = 0;
    std::uint32_t token = 0;  // row within the batch's concatenated tokens
    std::uint32_t expert = 0;
    auto operator<=>(const PairId&) const = default;
};

struct ScoredPair {
    PairId id;
    float score = 0.0f;
};

struct PruneMask {
    double p = 1.0;
    PruneScope scope = PruneScope::kGlobal;
    std::size_t total = 0;
    std::vector<PairId> retained;  // sorted
    /// Lowest retained score per scope group (+inf for an empty group).
    std::vector<float> thresholds;
    float threshold_score = std::numeric_limits<float>::infinity();

    bool keeps(const PairId& id) const;
    std::size_t retained_count() const { return retained.size(); }
};

std::size_t scope_group(const PairId& id, PruneScope scope, std::size_t n_layers);
std::size_t scope_groups(PruneScope scope, std::size_t n_layers);

/// Every routed (pair, score) of both encoders' eval forwards.
std::vector<ScoredPair> routed_pairs(const std::array<EncodedBatch, 2>& forwards);

/// Keeps the top ceil(p·N) pairs of each scope group, ties broken by
/// ascending (encoder, layer, token, expert).
PruneMask build_prune_mask(const std::vector<ScoredPair>& pairs, double p, PruneScope scope, std::size_t n_layers);
/// Keeps every pair whose score reaches its group's threshold.
PruneMask threshold_mask(const std::vector<ScoredPair>& pairs, const std::vector<float>& thresholds, PruneScope scope,
                         std::size_t n_layers);

struct MaskPolicy {
    double p = 1.0;
    PruneScope scope = PruneScope::kGlobal;
    ThresholdMode mode = ThresholdMode::kPerBatch;
    std::vector<float> fixed_thresholds;  // used in kFixed mode
};

struct EmbeddedSet {
    std::vector<std::vector<double>> features;  // [z1; z2] per sample
    std::vector<std::size_t> labels;
    std::size_t routed_pairs = 0;
    std::size_t retained_pairs = 0;
    double active_param_pct = 100.0;  // per-token active parameters, 100 at p = 1
};

/// Eval-mode embeddings. With a policy, each batch is encoded once to collect
/// routing scores, masked, and encoded again with the mask applied.
EmbeddedSet embed_dataset(const S3Model& model, const Dataset& data, std::size_t batch_size,
                          const MaskPolicy* policy = nullptr);

/// Encoder forwards of one batch, optionally masked.
std::array<EncodedBatch, 2> encode_batch(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                         const PruneMask* mask = nullptr);

/// Per-token parameters excluding the router, with `retained` of `routed`
/// expert slots active, as a percentage of the unpruned count.
double active_param_pct(const EncoderConfig& cfg, std::size_t tokens, std::size_t routed, std::size_t retained);

/// Thresholds calibrated on the first `batch_size` samples of `data`.
std::vector<float> calibrate_thresholds(const S3Model& model, const Dataset& data, std::size_t batch_size, double p,
                                        PruneScope scope);

// Probing

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent with step 1/L.
class LogisticProbe {
public:
    void fit(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y, const ProbeConfig& cfg,
             std::uint64_t seed);
    std::size_t predict(const std::vector<double>& x) const;
    double accuracy(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y) const;
    std::size_t iterations() const { return iters_; }
    double final_grad_norm() const { return grad_norm_; }

private:
    std::size_t d_ = 0, c_ = 0;
    std::vector<double> mean_, scale_;
    std::vector<double> w_;  // c × (d + 1), bias last
    std::size_t iters_ = 0;
    double grad_norm_ = 0.0;
};

struct ProbeResult {
    std::vector<double> per_seed;  // accuracy in [0, 1]
    double mean = 0.0;
    double std = 0.0;
};

ProbeResult probe_embeddings(const EmbeddedSet& train, const EmbeddedSet& test, const ProbeConfig& cfg,
                             const std::vector<std::uint64_t>& seeds);
ProbeResult linear_probe(const S3Model& model, const Dataset& train, const Dataset& test, const ProbeConfig& cfg,
                         const std::vector<std::uint64_t>& seeds = {0, 1, 2}, std::size_t batch_size = 256,
                         const MaskPolicy* policy = nullptr);

struct SweepPoint {
    double p = 1.0;
    double accuracy = 0.0;  // [0, 1]
    double active_param_pct = 100.0;
    std::size_t retained_pairs = 0;
    std::size_t routed_pairs = 0;
};

std::vector<SweepPoint> sparsify_sweep(const S3Model& model, const Dataset& train, const Dataset& test,
                                       const SparsifyConfig& sparsify, const ProbeConfig& probe, std::uint64_t seed);

// Orchestration

/// Train and test splits generated from the run's data section.
std::pair<Dataset, Dataset> make_splits(const RunConfig& cfg);

struct SeedRun {
    std::uint64_t seed = 0;
    std::size_t chi = 0;
    double specialization_acc = 0.0;
    double selection_acc = 0.0;
    std::vector<SweepPoint> sweep;
    TrainLog specialization_log;
    SelectionResult selection;
};

/// Specialization → Selection → Sparsification for one seed at the config's χ.
SeedRun run_seed(const RunConfig& cfg, const Dataset& train, const Dataset& test, std::uint64_t seed);

/// Rows named none, suff+min, suff and min; "none" is Specialization only.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& train, const Dataset& test);

/// Router parameters versus all parameters for the given encoder config.
ParamRatioRow trainable_ratio(const EncoderConfig& cfg);

}  // namespace s3
