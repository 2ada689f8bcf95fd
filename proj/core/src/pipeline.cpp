#include "s3/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "s3/errors.hpp"
#include "s3/log.hpp"
#include "s3/ops.hpp"

namespace s3 {

MomentumSgd::MomentumSgd(std::vector<Tensor> params, float lr, float momentum, float clip)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), clip_(clip) {
    for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void MomentumSgd::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

double MomentumSgd::step() {
    std::vector<std::vector<float>> grads;
    grads.reserve(params_.size());
    double sq = 0.0;
    for (const Tensor& p : params_) {
        grads.push_back(p.grad());
        for (float g : grads.back()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const float factor = (clip_ > 0.0f && norm > clip_) ? static_cast<float>(clip_ / norm) : 1.0f;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto data = params_[i].mutable_data();
        auto& v = velocity_[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            v[j] = momentum_ * v[j] + factor * g[j];
            data[j] -= lr_ * v[j];
        }
    }
    return norm;
}

void TrainLog::append(std::size_t step, std::size_t epoch, const std::vector<std::pair<std::string, double>>& terms) {
    if (columns.empty()) {
        columns = {"step", "epoch"};
        for (const auto& [k, _] : terms) columns.push_back(k);
    }
    if (terms.size() + 2 != columns.size()) throw ArgumentError("train log: term set changed between steps");
    std::vector<double> row{static_cast<double>(step), static_cast<double>(epoch)};
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].first != columns[i + 2]) throw ArgumentError("train log: term order changed between steps");
        row.push_back(terms[i].second);
    }
    rows.push_back(std::move(row));
}

std::vector<double> TrainLog::column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw ArgumentError("train log has no column " + name);
    const std::size_t c = static_cast<std::size_t>(it - columns.begin());
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
}

std::string TrainLog::csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
    out += '\n';
    char buf[64];
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i < 2) std::snprintf(buf, sizeof buf, "%s%.0f", i ? "," : "", r[i]);
            else std::snprintf(buf, sizeof buf, ",%.6f", r[i]);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ArgumentError("batch_size must be positive");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
    }
    return out;
}

std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& labels,
                                                         std::size_t batch_size, Rng& rng) {
    if (batch_size < 2) throw ArgumentError("stratified batches need batch_size ≥ 2");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (auto& [c, idx] : by_class) {
        if (idx.size() < 2) {
            throw PreconditionError("class " + std::to_string(c) + " has fewer than two samples; cannot stratify");
        }
        rng.shuffle(idx);
    }
    std::vector<std::vector<std::size_t>> raw(1);
    std::map<std::size_t, std::size_t> cursor;
    bool any = true;
    while (any) {
        any = false;
        for (auto& [c, idx] : by_class) {
            std::size_t& k = cursor[c];
            if (k >= idx.size()) continue;
            any = true;
            if (raw.back().size() == batch_size) raw.emplace_back();
            raw.back().push_back(idx[k++]);
        }
    }
    // A class with a single member in a batch has no positive; drop it there.
    std::vector<std::vector<std::size_t>> out;
    for (auto& b : raw) {
        std::map<std::size_t, std::size_t> counts;
        for (std::size_t i : b) ++counts[labels[i]];
        std::vector<std::size_t> kept;
        for (std::size_t i : b) {
            if (counts[labels[i]] >= 2) kept.push_back(i);
        }
        if (kept.size() >= 2) out.push_back(std::move(kept));
    }
    return out;
}

std::vector<Tensor> modality_inputs(const Dataset& data, const std::vector<std::size_t>& idx, std::size_t m) {
    std::vector<Tensor> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(m == 0 ? data.at(i).m1 : data.at(i).m2);
    return out;
}

float effective_noise_sigma(const StageConfig& cfg, const EncoderConfig& enc) {
    if (cfg.noise_sigma < 0.0f) return 1.0f / static_cast<float>(enc.moe.n_experts());
    return cfg.noise_sigma;
}

namespace {

std::vector<std::size_t> batch_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y;
    y.reserve(idx.size());
    for (std::size_t i : idx) {
        if (!data.at(i).label) throw PreconditionError("sample " + std::to_string(i) + " has no label");
        y.push_back(*data[i].label);
    }
    return y;
}

std::string step_context(const char* stage, std::size_t step, std::size_t epoch) {
    return std::string(stage) + " diverged at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")";
}

}  // namespace

LossBreakdown specialization_loss(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                  const StageConfig& cfg, Rng& noise_rng) {
    const float sigma = effective_noise_sigma(cfg, model.config);
    float jitter = cfg.jitter;
    if (sigma <= 0.0f && jitter <= 0.0f) jitter = 0.05f;  // otherwise the two views coincide
    std::array<Tensor, 2> z, view;
    std::vector<RoutingTrace> traces;
    for (std::size_t m = 0; m < 2; ++m) {
        const auto inputs = modality_inputs(data, idx, m);
        EncodeOptions a;
        a.noise = {&noise_rng, sigma};
        EncodedBatch primary = model.enc[m].encode(inputs, a);
        EncodeOptions b = a;
        b.jitter = jitter;
        b.jitter_rng = &noise_rng;
        EncodedBatch second = model.enc[m].encode(inputs, b);
        z[m] = primary.z;
        view[m] = second.z;
        if (cfg.weights.lambda_aux > 0.0f) {
            for (const auto& layer : primary.layers) {
                traces.push_back({layer.logits, layer.noisy_logits, layer.probs, model.config.moe.k(), sigma});
            }
        }
    }
    EmbeddingBatch eb{z[0], z[1], view[0], view[1], {}};
    return l_special(eb, traces, cfg.weights);
}

LossBreakdown selection_loss(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                             const StageConfig& cfg, std::array<EncodedBatch, 2>* forwards) {
    std::array<EncodedBatch, 2> fw;
    for (std::size_t m = 0; m < 2; ++m) fw[m] = model.enc[m].encode(modality_inputs(data, idx, m));
    EmbeddingBatch eb{fw[0].z, fw[1].z, {}, {}, batch_labels(data, idx)};
    LossBreakdown out = l_select(eb, cfg.weights);
    if (forwards) *forwards = std::move(fw);
    return out;
}

TrainLog train_specialization(S3Model& model, const Dataset& data, const StageConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::kSpecialization) throw ConfigError("train_specialization needs a specialization config");
    if (data.size() < 2 && cfg.epochs > 0) throw DegenerateInputError("specialization needs at least two samples");
    Rng root(cfg.seed);
    Rng batch_rng = root.derive(1);
    Rng noise_rng = root.derive(2);
    std::vector<Tensor> params;
    for (auto& p : model.parameters()) params.push_back(p.tensor);
    MomentumSgd opt(params, cfg.learning_rate, cfg.momentum, cfg.grad_clip);
    TrainLog log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, batch_rng)) {
            if (idx.size() < 2) continue;
            opt.zero_grad();
            LossBreakdown lb;
            double gnorm = 0.0;
            try {
                lb = specialization_loss(model, data, idx, cfg, noise_rng);
                if (!std::isfinite(lb.total.item())) throw NumericError("loss is not finite");
                lb.total.backward();
                gnorm = opt.step();
            } catch (const NumericError& e) {
                throw NumericError(step_context("specialization", step, epoch) + ": " + e.what());
            }
            auto terms = lb.terms;
            terms.emplace_back("grad_norm", gnorm);
            log.append(step, epoch, terms);
            ++step;
        }
    }
    return log;
}

namespace {

// Turns off gradients for everything except the routers while alive.
class RouterOnly {
public:
    explicit RouterOnly(S3Model& model) {
        for (auto& p : model.parameters()) {
            if (p.group == ParamGroup::kRouter) continue;
            saved_.emplace_back(p.tensor, p.tensor.requires_grad());
            p.tensor.set_requires_grad(false);
        }
    }
    ~RouterOnly() {
        for (auto& [t, flag] : saved_) t.set_requires_grad(flag);
    }

private:
    std::vector<std::pair<Tensor, bool>> saved_;
};

}  // namespace

SelectionResult train_selection(S3Model& model, const Dataset& data, const StageConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::kSelection) throw ConfigError("train_selection needs a selection config");
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    const auto labels = batch_labels(data, all);
    Rng batch_rng = Rng(cfg.seed).derive(3);
    RouterOnly freeze(model);
    MomentumSgd opt(model.router_parameters(), cfg.learning_rate, cfg.momentum, cfg.grad_clip);
    SelectionResult res;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& idx : stratified_batches(labels, cfg.batch_size, batch_rng)) {
            opt.zero_grad();
            std::array<EncodedBatch, 2> fw;
            LossBreakdown lb;
            double gnorm = 0.0;
            try {
                lb = selection_loss(model, data, idx, cfg, &fw);
                if (!std::isfinite(lb.total.item())) throw NumericError("loss is not finite");
                lb.total.backward();
            } catch (const NumericError& e) {
                throw NumericError(step_context("selection", step, epoch) + ": " + e.what());
            }
            auto terms = lb.terms;
            for (std::size_t m = 0; m < 2; ++m) {
                std::vector<Tensor> probs;
                for (const auto& layer : fw[m].layers) probs.push_back(layer.probs);
                res.entropy.record(step, m, probs);
                const auto& snap = res.entropy.rows().back();
                terms.emplace_back("local_entropy_m" + std::to_string(m + 1), snap.local_entropy);
                terms.emplace_back("global_neg_entropy_m" + std::to_string(m + 1), snap.global_neg_entropy);
            }
            try {
                gnorm = opt.step();
            } catch (const NumericError& e) {
                throw NumericError(step_context("selection", step, epoch) + ": " + e.what());
            }
            terms.emplace_back("grad_norm", gnorm);
            res.log.append(step, epoch, terms);
            ++step;
        }
    }
    return res;
}

// Sparsification

bool PruneMask::keeps(const PairId& id) const { return std::binary_search(retained.begin(), retained.end(), id); }

std::size_t scope_groups(PruneScope scope, std::size_t n_layers) {
    switch (scope) {
        case PruneScope::kGlobal: return 1;
        case PruneScope::kPerEncoder: return 2;
        case PruneScope::kPerLayer: return 2 * n_layers;
    }
    return 1;
}

std::size_t scope_group(const PairId& id, PruneScope scope, std::size_t n_layers) {
    switch (scope) {
        case PruneScope::kGlobal: return 0;
        case PruneScope::kPerEncoder: return id.encoder;
        case PruneScope::kPerLayer: return id.encoder * n_layers + id.layer;
    }
    return 0;
}

std::vector<ScoredPair> routed_pairs(const std::array<EncodedBatch, 2>& forwards) {
    std::vector<ScoredPair> out;
    for (std::uint32_t m = 0; m < 2; ++m) {
        const auto& layers = forwards[m].layers;
        for (std::uint32_t l = 0; l < layers.size(); ++l) {
            const auto& recs = layers[l].records;
            for (std::uint32_t t = 0; t < recs.size(); ++t) {
                for (std::size_t e : recs[t].selected) {
                    out.push_back({{m, l, t, static_cast<std::uint32_t>(e)}, recs[t].scores[e]});
                }
            }
        }
    }
    return out;
}

namespace {

void finalize(PruneMask& mask) {
    std::sort(mask.retained.begin(), mask.retained.end());
    mask.threshold_score = std::numeric_limits<float>::infinity();
    for (float t : mask.thresholds) mask.threshold_score = std::min(mask.threshold_score, t);
}

}  // namespace

PruneMask build_prune_mask(const std::vector<ScoredPair>& pairs, double p, PruneScope scope, std::size_t n_layers) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("preservation ratio must lie in [0, 1]");
    PruneMask mask;
    mask.p = p;
    mask.scope = scope;
    mask.total = pairs.size();
    const std::size_t n_groups = scope_groups(scope, n_layers);
    std::vector<std::vector<const ScoredPair*>> groups(n_groups);
    for (const auto& sp : pairs) groups.at(scope_group(sp.id, scope, n_layers)).push_back(&sp);
    mask.thresholds.assign(n_groups, std::numeric_limits<float>::infinity());
    for (std::size_t g = 0; g < n_groups; ++g) {
        auto& v = groups[g];
        std::sort(v.begin(), v.end(), [](const ScoredPair* a, const ScoredPair* b) {
            if (a->score != b->score) return a->score > b->score;
            return a->id < b->id;
        });
        // Guard against p·N landing a hair above an integer.
        const double exact = p * static_cast<double>(v.size());
        const auto keep = static_cast<std::size_t>(std::ceil(exact - 1e-9));
        for (std::size_t i = 0; i < keep && i < v.size(); ++i) mask.retained.push_back(v[i]->id);
        if (keep > 0 && !v.empty()) mask.thresholds[g] = v[std::min(keep, v.size()) - 1]->score;
    }
    finalize(mask);
    return mask;
}

PruneMask threshold_mask(const std::vector<ScoredPair>& pairs, const std::vector<float>& thresholds, PruneScope scope,
                         std::size_t n_layers) {
    if (thresholds.size() != scope_groups(scope, n_layers)) throw ArgumentError("threshold count does not match scope");
    PruneMask mask;
    mask.scope = scope;
    mask.total = pairs.size();
    mask.thresholds = thresholds;
    for (const auto& sp : pairs) {
        if (sp.score >= thresholds[scope_group(sp.id, scope, n_layers)]) mask.retained.push_back(sp.id);
    }
    mask.p = pairs.empty() ? 1.0 : static_cast<double>(mask.retained.size()) / static_cast<double>(pairs.size());
    finalize(mask);
    return mask;
}

std::array<EncodedBatch, 2> encode_batch(const S3Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                         const PruneMask* mask) {
    std::array<EncodedBatch, 2> out;
    for (std::uint32_t m = 0; m < 2; ++m) {
        EncodeOptions opts;
        LayerPairFilter filter;
        if (mask) {
            filter = [mask, m](std::size_t layer, std::size_t row, std::size_t expert) {
                return mask->keeps({m, static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(row),
                                    static_cast<std::uint32_t>(expert)});
            };
            opts.filter = &filter;
        }
        out[m] = model.enc[m].encode(modality_inputs(data, idx, m), opts);
    }
    return out;
}

double active_param_pct(const EncoderConfig& cfg, std::size_t tokens, std::size_t routed, std::size_t retained) {
    const double d = static_cast<double>(cfg.d_model());
    const double proj = static_cast<double>(cfg.d_in) * d + d;
    const double attn = 4.0 * (d * d + d) + (cfg.layer_norm ? 4.0 * d : 0.0);
    const double dense = proj + static_cast<double>(cfg.n_layers) * attn;
    const double expert = static_cast<double>(expert_params(cfg.moe).total());
    const double full = static_cast<double>(tokens) * dense + static_cast<double>(routed) * expert;
    if (full <= 0.0) return 100.0;
    return 100.0 * (static_cast<double>(tokens) * dense + static_cast<double>(retained) * expert) / full;
}

EmbeddedSet embed_dataset(const S3Model& model, const Dataset& data, std::size_t batch_size, const MaskPolicy* policy) {
    if (batch_size == 0) throw ArgumentError("embed: batch_size must be positive");
    NoGradGuard guard;
    EmbeddedSet out;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        auto fw = encode_batch(model, data, idx);
        if (policy) {
            const auto pairs = routed_pairs(fw);
            const PruneMask mask =
                policy->mode == ThresholdMode::kFixed
                    ? threshold_mask(pairs, policy->fixed_thresholds, policy->scope, model.config.n_layers)
                    : build_prune_mask(pairs, policy->p, policy->scope, model.config.n_layers);
            out.routed_pairs += mask.total;
            out.retained_pairs += mask.retained_count();
            fw = encode_batch(model, data, idx, &mask);
        } else {
            const std::size_t n = routed_pairs(fw).size();
            out.routed_pairs += n;
            out.retained_pairs += n;
        }
        tokens += fw[0].offsets.back() + fw[1].offsets.back();
        const std::size_t d = fw[0].z.cols();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::vector<double> f(2 * d);
            for (std::size_t m = 0; m < 2; ++m) {
                auto z = fw[m].z.data();
                for (std::size_t j = 0; j < d; ++j) f[m * d + j] = z[b * d + j];
            }
            out.features.push_back(std::move(f));
            if (data[idx[b]].label) out.labels.push_back(*data[idx[b]].label);
        }
    }
    if (out.labels.size() != out.features.size()) out.labels.clear();
    out.active_param_pct = active_param_pct(model.config, tokens, out.routed_pairs, out.retained_pairs);
    return out;
}

std::vector<float> calibrate_thresholds(const S3Model& model, const Dataset& data, std::size_t batch_size, double p,
                                        PruneScope scope) {
    if (data.empty()) throw DegenerateInputError("calibration needs at least one sample");
    NoGradGuard guard;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(batch_size, data.size()); ++i) idx.push_back(i);
    return build_prune_mask(routed_pairs(encode_batch(model, data, idx)), p, scope, model.config.n_layers).thresholds;
}

// Probing

namespace {

// Largest eigenvalue of XᵀX/n by power iteration.
double gram_top_eigenvalue(const std::vector<std::vector<double>>& x, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(d);
    for (double& e : v) e = rng.normal();
    double lambda = 0.0;
    for (int it = 0; it < 100; ++it) {
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        for (double& e : v) e /= norm;
        std::vector<double> w(d, 0.0);
        for (const auto& row : x) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += row[j] * v[j];
            for (std::size_t j = 0; j < d; ++j) w[j] += dot * row[j];
        }
        double next = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            w[j] /= static_cast<double>(x.size());
            next += w[j] * v[j];
        }
        v = std::move(w);
        if (std::abs(next - lambda) <= 1e-9 * std::max(1.0, next)) return next;
        lambda = next;
    }
    return lambda;
}

}  // namespace

void LogisticProbe::fit(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y,
                        const ProbeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (x.empty() || x.size() != y.size()) throw ArgumentError("probe: features and labels must be paired and nonempty");
    d_ = x[0].size();
    c_ = *std::max_element(y.begin(), y.end()) + 1;
    if (std::all_of(y.begin(), y.end(), [&](std::size_t v) { return v == y[0]; })) {
        throw PreconditionError("probe: training split has a single class");
    }
    const std::size_t n = x.size();
    mean_.assign(d_, 0.0);
    scale_.assign(d_, 0.0);
    for (const auto& row : x) {
        if (row.size() != d_) throw DimensionError("probe: ragged features");
        for (std::size_t j = 0; j < d_; ++j) mean_[j] += row[j] / static_cast<double>(n);
    }
    for (const auto& row : x)
        for (std::size_t j = 0; j < d_; ++j) scale_[j] += (row[j] - mean_[j]) * (row[j] - mean_[j]);
    for (double& s : scale_) s = std::sqrt(s / static_cast<double>(n)) + 1e-8;
    const std::size_t da = d_ + 1;
    std::vector<std::vector<double>> xs(n, std::vector<double>(da, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d_; ++j) xs[i][j] = (x[i][j] - mean_[j]) / scale_[j];

    // Softmax cross-entropy has curvature at most ½·λmax(XᵀX/n).
    const double lip = 0.5 * gram_top_eigenvalue(xs, da, seed) + cfg.l2;
    const double lr = 1.0 / std::max(lip, 1e-12);
    Rng rng(seed);
    w_.assign(c_ * da, 0.0);
    for (double& v : w_) v = 0.01 * rng.normal();

    std::vector<double> grad(c_ * da), logits(c_);
    for (iters_ = 0; iters_ < cfg.max_iters; ++iters_) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::size_t c = 0; c < c_; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j < da; ++j) s += w_[c * da + j] * xs[i][j];
                logits[c] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (double& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t c = 0; c < c_; ++c) {
                const double r = logits[c] / z - (y[i] == c ? 1.0 : 0.0);
                for (std::size_t j = 0; j < da; ++j) grad[c * da + j] += r * xs[i][j];
            }
        }
        double gn = 0.0;
        for (std::size_t c = 0; c < c_; ++c)
            for (std::size_t j = 0; j < da; ++j) {
                double& g = grad[c * da + j];
                g /= static_cast<double>(n);
                if (j < d_) g += cfg.l2 * w_[c * da + j];
                gn += g * g;
            }
        grad_norm_ = std::sqrt(gn);
        if (grad_norm_ < cfg.tolerance) break;
        for (std::size_t k = 0; k < w_.size(); ++k) w_[k] -= lr * grad[k];
    }
}

std::size_t LogisticProbe::predict(const std::vector<double>& x) const {
    if (x.size() != d_) throw DimensionError("probe: feature width mismatch");
    const std::size_t da = d_ + 1;
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t c = 0; c < c_; ++c) {
        double s = w_[c * da + d_];
        for (std::size_t j = 0; j < d_; ++j) s += w_[c * da + j] * (x[j] - mean_[j]) / scale_[j];
        if (s > best_s) {
            best_s = s;
            best = c;
        }
    }
    return best;
}

double LogisticProbe::accuracy(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y) const {
    if (x.empty() || x.size() != y.size()) throw ArgumentError("probe: features and labels must be paired and nonempty");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.size(); ++i) hit += predict(x[i]) == y[i];
    return static_cast<double>(hit) / static_cast<double>(x.size());
}

ProbeResult probe_embeddings(const EmbeddedSet& train, const EmbeddedSet& test, const ProbeConfig& cfg,
                             const std::vector<std::uint64_t>& seeds) {
    if (train.labels.empty() || test.labels.empty()) throw PreconditionError("probe: both splits need labels");
    if (seeds.empty()) throw ArgumentError("probe: at least one seed");
    ProbeResult r;
    for (std::uint64_t s : seeds) {
        LogisticProbe probe;
        probe.fit(train.features, train.labels, cfg, s);
        r.per_seed.push_back(probe.accuracy(test.features, test.labels));
    }
    r.mean = mean_of(r.per_seed);
    r.std = std_of(r.per_seed);
    return r;
}

ProbeResult linear_probe(const S3Model& model, const Dataset& train, const Dataset& test, const ProbeConfig& cfg,
                         const std::vector<std::uint64_t>& seeds, std::size_t batch_size, const MaskPolicy* policy) {
    return probe_embeddings(embed_dataset(model, train, batch_size, policy), embed_dataset(model, test, batch_size, policy),
                            cfg, seeds);
}

std::vector<SweepPoint> sparsify_sweep(const S3Model& model, const Dataset& train, const Dataset& test,
                                       const SparsifyConfig& sparsify, const ProbeConfig& probe, std::uint64_t seed) {
    sparsify.validate();
    std::vector<SweepPoint> out;
    for (double p : sparsify.p_grid) {
        MaskPolicy policy{p, sparsify.scope, sparsify.threshold_mode, {}};
        if (policy.mode == ThresholdMode::kFixed) {
            policy.fixed_thresholds = calibrate_thresholds(model, train, sparsify.eval_batch_size, p, sparsify.scope);
        }
        const EmbeddedSet tr = embed_dataset(model, train, sparsify.eval_batch_size, &policy);
        const EmbeddedSet te = embed_dataset(model, test, sparsify.eval_batch_size, &policy);
        SweepPoint pt;
        pt.p = p;
        pt.accuracy = probe_embeddings(tr, te, probe, {seed}).mean;
        pt.active_param_pct = te.active_param_pct;
        pt.retained_pairs = te.retained_pairs;
        pt.routed_pairs = te.routed_pairs;
        out.push_back(pt);
    }
    return out;
}

// Orchestration

std::pair<Dataset, Dataset> make_splits(const RunConfig& cfg) {
    Dataset all = generate(cfg.factors, cfg.task, cfg.data.n_train + cfg.data.n_test, cfg.data.seed);
    Dataset test(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.data.n_train)),
                 std::make_move_iterator(all.end()));
    all.resize(cfg.data.n_train);
    return {std::move(all), std::move(test)};
}

SeedRun run_seed(const RunConfig& cfg, const Dataset& train, const Dataset& test, std::uint64_t seed) {
    SeedRun r;
    r.seed = seed;
    r.chi = cfg.encoder.moe.granularity;
    S3Model model(cfg.encoder, seed);
    StageConfig spec = cfg.specialization;
    spec.seed = seed;
    r.specialization_log = train_specialization(model, train, spec);
    const std::size_t eb = cfg.sparsify.eval_batch_size;
    r.specialization_acc = linear_probe(model, train, test, cfg.probe, {seed}, eb).mean;
    StageConfig sel = cfg.selection;
    sel.seed = seed;
    r.selection = train_selection(model, train, sel);
    r.selection_acc = linear_probe(model, train, test, cfg.probe, {seed}, eb).mean;
    r.sweep = sparsify_sweep(model, train, test, cfg.sparsify, cfg.probe, seed);
    return r;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& train, const Dataset& test) {
    std::vector<AblationRow> rows{{"none", {}}, {"suff+min", {}}, {"suff", {}}, {"min", {}}};
    const std::size_t eb = cfg.sparsify.eval_batch_size;
    for (std::uint64_t seed : cfg.seeds) {
        S3Model model(cfg.encoder, seed);
        StageConfig spec = cfg.specialization;
        spec.seed = seed;
        train_specialization(model, train, spec);
        rows[0].accuracy.push_back(100.0 * linear_probe(model, train, test, cfg.probe, {seed}, eb).mean);
        for (std::size_t v = 1; v < rows.size(); ++v) {
            S3Model copy = model.deep_copy();
            StageConfig sel = cfg.selection;
            sel.seed = seed;
            if (rows[v].variant == "suff") sel.weights.lambda_min = 0.0f;
            if (rows[v].variant == "min") sel.weights.lambda_suff = 0.0f;
            train_selection(copy, train, sel);
            rows[v].accuracy.push_back(100.0 * linear_probe(copy, train, test, cfg.probe, {seed}, eb).mean);
        }
    }
    return rows;
}

ParamRatioRow trainable_ratio(const EncoderConfig& cfg) {
    S3Model model(cfg, 0);
    return {cfg.moe.granularity, model.count(ParamGroup::kRouter).total(), model.total_count().total()};
}

}  // namespace s3
