#include "s3/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "s3/errors.hpp"
#include "s3/log.hpp"
#include "s3/ops.hpp"

namespace s3 {

void LossWeights::validate() const {
    for (float v : {lambda_rep, lambda_dsc, lambda_aux, lambda_suff, lambda_min, lambda_imp, lambda_load, lambda_local,
                    lambda_global}) {
        if (!(v >= 0.0f)) throw ConfigError("loss weights must be nonnegative");
    }
    if (!(tau > 0.0f)) throw ConfigError("temperature tau must be positive");
}

double LossBreakdown::term(const std::string& name) const {
    for (const auto& [k, v] : terms) {
        if (k == name) return v;
    }
    throw ArgumentError("no loss term named " + name);
}

namespace {

void check_pair(const Tensor& src, const Tensor& dst, const char* op) {
    if (src.ndim() != 2 || src.shape() != dst.shape()) {
        throw DimensionError(std::string(op) + ": src " + shape_str(src.shape()) + " and dst " +
                             shape_str(dst.shape()) + " must be matching B×d");
    }
    if (src.rows() < 2) throw ArgumentError(std::string(op) + ": batch size must be at least 2");
}

void check_labels(const Tensor& src, const std::vector<std::size_t>& labels, const char* op) {
    if (labels.empty()) throw ArgumentError(std::string(op) + ": labels are required");
    if (labels.size() != src.rows()) throw DimensionError(std::string(op) + ": label count does not match batch");
}

Tensor logits_of(const Tensor& src, const Tensor& dst, float tau) {
    if (!(tau > 0.0f)) throw ArgumentError("temperature must be positive");
    return ops::scale(ops::matmul_bt(src, dst), 1.0f / tau);
}

const Tensor& view_or(const Tensor& view, const Tensor& fallback) { return view.defined() ? view : fallback; }

// Σ λ·term over the terms with λ > 0.
Tensor weighted_sum(const std::vector<std::pair<float, Tensor>>& parts) {
    Tensor total = Tensor::scalar(0.0f);
    for (const auto& [w, t] : parts) {
        if (w > 0.0f) total = ops::add(total, ops::scale(t, w));
    }
    return total;
}

}  // namespace

Tensor info_nce(const Tensor& src, const Tensor& dst, float tau) {
    check_pair(src, dst, "info_nce");
    const std::size_t B = src.rows();
    Tensor lsm = ops::log_softmax_rows(logits_of(src, dst, tau));
    std::vector<std::size_t> diag(B);
    for (std::size_t i = 0; i < B; ++i) diag[i] = i;
    return ops::neg(ops::mean(ops::pick(lsm, diag, diag)));
}

Tensor l_rep(const EmbeddingBatch& b, float tau) {
    return ops::scale(ops::add(info_nce(b.z1, view_or(b.z1_view, b.z1), tau),
                               info_nce(b.z2, view_or(b.z2_view, b.z2), tau)),
                      0.5f);
}

Tensor l_dsc(const EmbeddingBatch& b, float tau) {
    return ops::scale(ops::add(info_nce(b.z1, b.z2, tau), info_nce(b.z2, b.z1, tau)), 0.5f);
}

Tensor sup_con(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& labels, float tau,
               bool intra_modal, std::size_t* skipped) {
    check_pair(src, dst, "sup_con");
    check_labels(src, labels, "sup_con");
    const std::size_t B = src.rows();
    std::vector<std::size_t> rows, cols;
    std::vector<float> coef;
    std::size_t n_valid = 0, n_skipped = 0;
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < B; ++i) {
        pos.clear();
        for (std::size_t j = 0; j < B; ++j) {
            if (labels[j] == labels[i] && !(intra_modal && j == i)) pos.push_back(j);
        }
        if (pos.empty()) {
            ++n_skipped;
            continue;
        }
        ++n_valid;
        for (std::size_t j : pos) {
            rows.push_back(i);
            cols.push_back(j);
            coef.push_back(1.0f / static_cast<float>(pos.size()));
        }
    }
    if (skipped) *skipped = n_skipped;
    else if (n_skipped > 0) log_warn("sup_con: dropped " + std::to_string(n_skipped) + " anchors with no positive");
    if (n_valid == 0) throw DegenerateInputError("sup_con: no anchor has a positive");
    for (float& c : coef) c /= static_cast<float>(n_valid);
    Tensor lsm = ops::log_softmax_rows(logits_of(src, dst, tau));
    const std::size_t n = coef.size();
    Tensor weights = Tensor::from({n}, std::move(coef));
    return ops::neg(ops::sum(ops::mul(ops::pick(lsm, rows, cols), weights)));
}

Tensor l_suff(const EmbeddingBatch& b, float tau) {
    Tensor s = ops::add(ops::add(sup_con(b.z1, b.z1, b.labels, tau, true), sup_con(b.z1, b.z2, b.labels, tau, false)),
                        ops::add(sup_con(b.z2, b.z1, b.labels, tau, false), sup_con(b.z2, b.z2, b.labels, tau, true)));
    return ops::scale(s, 0.25f);
}

Tensor compactness(const Tensor& src, const Tensor& dst, const std::vector<std::size_t>& labels) {
    if (src.ndim() != 2 || src.shape() != dst.shape()) throw DimensionError("compactness: src/dst shape mismatch");
    check_labels(src, labels, "compactness");
    const std::size_t B = src.rows();
    std::map<std::size_t, std::size_t> class_index;
    for (std::size_t y : labels) class_index.emplace(y, 0);
    std::size_t c = 0;
    for (auto& [y, idx] : class_index) idx = c++;
    std::vector<std::size_t> count(c, 0);
    for (std::size_t y : labels) ++count[class_index[y]];
    std::vector<float> avg(c * B, 0.0f);
    std::vector<std::size_t> of(B);
    for (std::size_t j = 0; j < B; ++j) {
        of[j] = class_index[labels[j]];
        avg[of[j] * B + j] = 1.0f / static_cast<float>(count[of[j]]);
    }
    Tensor means = ops::matmul(Tensor::from({c, B}, std::move(avg)), dst);
    Tensor mu_hat;
    try {
        mu_hat = ops::l2_normalize_rows(means);
    } catch (const DegenerateInputError&) {
        throw DegenerateInputError("compactness: a class mean has zero norm");
    }
    Tensor inner = ops::sum(ops::mul(src, ops::gather_rows(mu_hat, of)));
    return ops::neg(ops::scale(inner, 1.0f / static_cast<float>(B)));
}

Tensor l_min(const EmbeddingBatch& b) {
    Tensor s = ops::add(ops::add(compactness(b.z1, b.z1, b.labels), compactness(b.z1, b.z2, b.labels)),
                        ops::add(compactness(b.z2, b.z1, b.labels), compactness(b.z2, b.z2, b.labels)));
    return ops::scale(s, 0.25f);
}

double vmf_kl(const std::vector<double>& mu_x, const std::vector<double>& mu_y_hat, double kappa, double a_d_kappa) {
    if (mu_x.size() != mu_y_hat.size()) throw DimensionError("vmf_kl: dimension mismatch");
    double nx = 0.0, ny = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < mu_x.size(); ++i) {
        nx += mu_x[i] * mu_x[i];
        ny += mu_y_hat[i] * mu_y_hat[i];
        dot += mu_x[i] * mu_y_hat[i];
    }
    if (std::abs(std::sqrt(nx) - 1.0) > 1e-6 || std::abs(std::sqrt(ny) - 1.0) > 1e-6) {
        throw ArgumentError("vmf_kl: mean directions must be unit vectors");
    }
    if (kappa < 0.0 || a_d_kappa < 0.0 || a_d_kappa >= 1.0) throw ArgumentError("vmf_kl: need kappa ≥ 0, A in [0,1)");
    return std::max(0.0, kappa * a_d_kappa * (1.0 - dot));
}

Tensor importance_loss(const Tensor& probs) { return ops::cv_squared(ops::sum_axis(probs, 0)); }

Tensor load_loss(const Tensor& logits, const Tensor& noisy_logits, std::size_t k, float sigma) {
    if (!(sigma > 0.0f)) throw ArgumentError("load_loss: sigma must be positive");
    if (logits.ndim() != 2) throw DimensionError("load_loss: logits must be T×N");
    const Tensor& noisy = noisy_logits.defined() ? noisy_logits : logits;
    if (noisy.shape() != logits.shape()) throw DimensionError("load_loss: noisy/clean logits shape mismatch");
    const std::size_t T = logits.rows(), N = logits.cols();
    if (k < 1 || k > N) throw ArgumentError("load_loss: k outside [1, N]");
    // Every expert is always selected when k = N, so all loads are T.
    if (k == N) return Tensor::scalar(0.0f);

    std::vector<std::size_t> rows(T * N), cols(T * N);
    auto nd = noisy.data();
    for (std::size_t t = 0; t < T; ++t) {
        auto top = ops::topk(nd.subspan(t * N, N), k + 1);
        std::vector<bool> in_top(N, false);
        for (std::size_t s = 0; s < k; ++s) in_top[top.indices[s]] = true;
        for (std::size_t i = 0; i < N; ++i) {
            rows[t * N + i] = t;
            // Threshold is the k-th largest noisy logit among the other experts.
            cols[t * N + i] = in_top[i] ? top.indices[k] : top.indices[k - 1];
        }
    }
    Tensor thr = ops::pick(noisy, rows, cols).reshape({T, N});
    Tensor p = ops::normal_cdf(ops::scale(ops::sub(logits, thr), 1.0f / sigma));
    return ops::cv_squared(ops::sum_axis(p, 0));
}

Tensor local_entropy_loss(const Tensor& probs) { return ops::mean(ops::entropy_rows(probs)); }

Tensor global_entropy_loss(const Tensor& probs) { return ops::neg(ops::entropy(ops::mean_axis(probs, 0))); }

Tensor scores_tensor(const std::vector<RoutingRecord>& records) {
    if (records.empty()) throw DegenerateInputError("scores_tensor: no records");
    const std::size_t N = records.front().scores.size();
    std::vector<float> data;
    data.reserve(records.size() * N);
    for (const auto& r : records) {
        if (r.scores.size() != N) throw DimensionError("scores_tensor: records disagree on expert count");
        data.insert(data.end(), r.scores.begin(), r.scores.end());
    }
    return Tensor::from({records.size(), N}, std::move(data));
}

LossBreakdown aux_loss(const std::vector<RoutingTrace>& layers, const LossWeights& w) {
    if (layers.empty()) throw ArgumentError("aux_loss: no routing traces");
    Tensor imp = Tensor::scalar(0.0f), load = Tensor::scalar(0.0f), local = Tensor::scalar(0.0f),
           global = Tensor::scalar(0.0f);
    for (const auto& l : layers) {
        const float sigma = l.sigma > 0.0f ? l.sigma : 1.0f / static_cast<float>(l.logits.cols());
        imp = ops::add(imp, importance_loss(l.probs));
        load = ops::add(load, load_loss(l.logits, l.noisy_logits, l.k, sigma));
        local = ops::add(local, local_entropy_loss(l.probs));
        global = ops::add(global, global_entropy_loss(l.probs));
    }
    const float inv = 1.0f / static_cast<float>(layers.size());
    imp = ops::scale(imp, inv);
    load = ops::scale(load, inv);
    local = ops::scale(local, inv);
    global = ops::scale(global, inv);
    LossBreakdown out;
    out.total = weighted_sum({{w.lambda_imp, imp}, {w.lambda_load, load}, {w.lambda_local, local},
                              {w.lambda_global, global}});
    out.terms = {{"imp", imp.item()}, {"load", load.item()}, {"local", local.item()}, {"global", global.item()}};
    return out;
}

LossBreakdown l_special(const EmbeddingBatch& batch, const std::vector<RoutingTrace>& routing, const LossWeights& w) {
    w.validate();
    Tensor rep = l_rep(batch, w.tau);
    Tensor dsc = l_dsc(batch, w.tau);
    LossBreakdown out;
    std::vector<std::pair<float, Tensor>> parts{{w.lambda_rep, rep}, {w.lambda_dsc, dsc}};
    std::vector<std::pair<std::string, double>> aux_terms{{"imp", 0.0}, {"load", 0.0}, {"local", 0.0}, {"global", 0.0}};
    double aux_value = 0.0;
    if (!routing.empty()) {
        LossBreakdown aux = aux_loss(routing, w);
        parts.emplace_back(w.lambda_aux, aux.total);
        aux_terms = aux.terms;
        aux_value = aux.total.item();
    }
    out.total = weighted_sum(parts);
    out.terms = {{"total", out.total.item()}, {"rep", rep.item()}, {"dsc", dsc.item()}, {"aux", aux_value}};
    out.terms.insert(out.terms.end(), aux_terms.begin(), aux_terms.end());
    return out;
}

LossBreakdown l_select(const EmbeddingBatch& batch, const LossWeights& w) {
    w.validate();
    if (batch.labels.empty()) throw ArgumentError("l_select: labels are required");
    Tensor suff = l_suff(batch, w.tau);
    Tensor min = l_min(batch);
    LossBreakdown out;
    out.total = weighted_sum({{w.lambda_suff, suff}, {w.lambda_min, min}});
    out.terms = {{"total", out.total.item()}, {"suff", suff.item()}, {"min", min.item()}};
    return out;
}

}  // namespace s3
