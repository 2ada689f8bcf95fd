#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "s3/moe.hpp"
#include "s3/synthdata.hpp"
#include "s3/tensor.hpp"

namespace s3 {

/// Probability table over several discrete variables, row-major with the
/// last variable varying fastest. All quantities are in nats.
class DiscreteJoint {
public:
    DiscreteJoint() = default;
    DiscreteJoint(std::vector<std::size_t> sizes, std::vector<double> p);

    /// Plug-in joint from observed tuples.
    static DiscreteJoint empirical(std::vector<std::size_t> sizes, const std::vector<std::vector<std::size_t>>& samples);

    const std::vector<std::size_t>& sizes() const { return sizes_; }
    const std::vector<double>& probs() const { return p_; }
    std::size_t n_vars() const { return sizes_.size(); }
    std::size_t flat_index(const std::vector<std::size_t>& values) const;
    std::vector<std::size_t> unflatten(std::size_t index) const;

    /// Marginal table over `vars` (in the given order).
    std::vector<double> marginal(const std::vector<std::size_t>& vars) const;

private:
    std::vector<std::size_t> sizes_;
    std::vector<double> p_;
};

double entropy(const std::vector<double>& dist);
double entropy(const DiscreteJoint& joint, const std::vector<std::size_t>& vars);
double mutual_information(const DiscreteJoint& joint, const std::vector<std::size_t>& a,
                          const std::vector<std::size_t>& b);
double conditional_mi(const DiscreteJoint& joint, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                      const std::vector<std::size_t>& c);

/// Plug-in MI between two symbol sequences.
double plugin_mi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

struct DpiReport {
    double i_xy = 0.0;
    double i_zy = 0.0;
    bool holds = false;     // I(X;Y) ≥ I(Z;Y) − 1e-9
    bool equality = false;  // |I(X;Y) − I(Z;Y)| ≤ 1e-9
};

/// Joint over (Y, X, Z). Throws PreconditionError unless Y → X → Z is Markov.
DpiReport verify_dpi(const DiscreteJoint& yxz);
/// Builds (Y, X, Z) from p(y, x) [|Y|×|X|] and the channel p(z|x) [|X|×|Z|].
DpiReport verify_dpi(const std::vector<std::vector<double>>& p_yx, const std::vector<std::vector<double>>& p_z_given_x);

struct MiDecompositionReport {
    double exact_mi = 0.0;   // I(X¹;X²) over the constructed table
    double h_shared = 0.0;   // H(X_S)
    double plugin_mi = 0.0;  // from sampled latents
    std::size_t n_samples = 0;
    bool exact_ok = false;   // within 1e-9
    bool plugin_ok = false;  // within 0.05 nat
};

MiDecompositionReport verify_mi_decomposition(const FactorSpec& spec, std::size_t n_samples = 100000,
                                              std::uint64_t seed = 0);

struct ClLimitationReport {
    double i_xy = 0.0;  // I(X¹,X²;Y)
    double i_zy = 0.0;  // I(X_S;Y), the shared-only optimum
    double i_uy = 0.0;  // I(X_U¹,X_U²;Y)
    double gap = 0.0;   // i_xy − i_zy
    bool holds = false; // gap ≥ i_uy − 1e-9 and gap > 0
};

/// Throws PreconditionError when the label carries no information beyond X_S.
ClLimitationReport verify_cl_limitation(const FactorSpec& spec, const TaskSpec& task);

struct BoundStats {
    double max_estimate = 0.0;   // max over batches of log B − L
    double mean_estimate = 0.0;
    double exact_mi = 0.0;
    std::size_t n_batches = 0;
    bool holds = false;          // max_estimate ≤ exact_mi + tolerance
};

/// Pairs (x, z) drawn from the 2-D joint; the critic is ⟨g[x], h[z]⟩/τ with
/// row-normalized embedding tables g [|X|×d] and h [|Z|×d].
BoundStats bound_gap_infonce(const DiscreteJoint& xz, const std::vector<std::vector<float>>& g,
                             const std::vector<std::vector<float>>& h, float tau, std::size_t batch_size,
                             std::size_t n_batches, std::uint64_t seed, double tolerance = 0.1);

/// Labelled codes (y, c) drawn from the 2-D joint over (Y, code); each code has
/// a fixed embedding. The positive set of an anchor includes itself.
BoundStats bound_gap_supcon(const DiscreteJoint& y_code, const std::vector<std::vector<float>>& code_embeddings,
                            float tau, std::size_t batch_size, std::size_t n_batches, std::uint64_t seed,
                            double tolerance = 0.15);

/// Routing entropies of one stage step for one modality, averaged over layers.
struct EntropySnapshot {
    std::size_t step = 0;
    std::size_t modality = 0;
    double local_entropy = 0.0;       // mean per-token entropy of the scores
    double global_neg_entropy = 0.0;  // −H(token-averaged scores)
};

EntropySnapshot entropy_snapshot(std::size_t step, std::size_t modality, const std::vector<Tensor>& layer_probs);

class EntropyMonitor {
public:
    void record(std::size_t step, std::size_t modality, const std::vector<Tensor>& layer_probs);
    const std::vector<EntropySnapshot>& rows() const { return rows_; }
    /// step,modality,local_entropy,global_neg_entropy
    std::string csv() const;

private:
    std::vector<EntropySnapshot> rows_;
};

// Reports

/// "mean(std)" of percentages with two decimals, e.g. "77.95(0.59)".
std::string format_mean_std(const std::vector<double>& values);
double mean_of(const std::vector<double>& v);
/// Sample standard deviation (n − 1); 0 for fewer than two values.
double std_of(const std::vector<double>& v);

struct SweepRow {
    std::string dataset;
    std::size_t chi = 0;
    std::string stage;
    double p = 1.0;                  // preservation ratio; 1 outside sparsification
    std::vector<double> accuracy;    // per seed, percent
    double active_param_pct = 100.0;
    double trainable_param_pct = 100.0;
};

struct AblationRow {
    std::string variant;             // none | suff+min | suff | min | specialization
    std::vector<double> accuracy;    // per seed, percent
};

struct ParamRatioRow {
    std::size_t chi = 0;
    std::size_t trainable = 0;
    std::size_t total = 0;
};

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string param_ratio_csv(const std::vector<ParamRatioRow>& rows);

struct ReportBundle {
    std::vector<SweepRow> sweep;
    std::vector<AblationRow> ablation;
    std::vector<ParamRatioRow> param_ratio;
};

/// Writes sweep.csv, ablation.csv and param_ratio.csv into `dir`.
void emit_report(const ReportBundle& results, const std::string& dir);

}  // namespace s3
