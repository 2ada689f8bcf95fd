#include "s3/moe.hpp"

#include <cmath>

#include "s3/errors.hpp"

namespace s3 {

void MoEConfig::validate() const {
    if (d_model == 0) throw ConfigError("moe: d_model must be positive");
    if (granularity == 0 || expansion == 0) throw ConfigError("moe: granularity and expansion must be positive");
    if (ffn_width() % granularity != 0) {
        throw ConfigError("moe: d_ffn " + std::to_string(ffn_width()) + " not divisible by granularity " +
                          std::to_string(granularity));
    }
    if (k() < 1 || k() > n_experts()) {
        throw ConfigError("moe: top_k " + std::to_string(k()) + " outside [1, " + std::to_string(n_experts()) + "]");
    }
}

ParamCount dense_ffn_params(const MoEConfig& cfg) {
    return {2 * cfg.d_model * cfg.ffn_width(), cfg.ffn_width() + cfg.d_model};
}

ParamCount expert_params(const MoEConfig& cfg) {
    return {2 * cfg.d_model * cfg.expert_width(), cfg.expert_width() + cfg.d_model};
}

ParamCount moe_expert_params(const MoEConfig& cfg) { return expert_params(cfg) * cfg.n_experts(); }

ParamCount router_params(const MoEConfig& cfg) { return {cfg.n_experts() * cfg.d_model, 0}; }

ParamCount active_params_per_token(const MoEConfig& cfg, std::size_t k) { return expert_params(cfg) * k; }

const char* param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::kInputProjection: return "input_projection";
        case ParamGroup::kAttention: return "attention";
        case ParamGroup::kExperts: return "experts";
        case ParamGroup::kRouter: return "router";
    }
    return "unknown";
}

Tensor ffn_forward(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                   ops::Activation act) {
    const bool single = x.ndim() == 1;
    const Tensor rows = single ? x.reshape({1, x.numel()}) : x;
    if (w1.ndim() != 2 || w2.ndim() != 2 || rows.cols() != w1.cols() || w2.cols() != w1.rows() ||
        b1.numel() != w1.rows() || b2.numel() != w2.rows()) {
        throw DimensionError("ffn_forward: parameter shapes W1 " + shape_str(w1.shape()) + ", W2 " +
                             shape_str(w2.shape()) + " do not fit input " + shape_str(x.shape()));
    }
    Tensor h = ops::activate(ops::linear(rows, w1, b1), act);
    Tensor y = ops::linear(h, w2, b2);
    return single ? y.reshape({w2.rows()}) : y;
}

Expert Expert::init(std::size_t d_model, std::size_t d_expert, Rng& rng) {
    Expert e;
    e.w1 = ops::randn({d_expert, d_model}, rng, 1.0f / std::sqrt(static_cast<float>(d_model)), 0.0f, true);
    e.b1 = Tensor::zeros({d_expert}, true);
    e.w2 = ops::randn({d_model, d_expert}, rng, 1.0f / std::sqrt(static_cast<float>(d_expert)), 0.0f, true);
    e.b2 = Tensor::zeros({d_model}, true);
    return e;
}

Router Router::init(std::size_t n_experts, std::size_t d_model, Rng& rng) {
    return {ops::randn({n_experts, d_model}, rng, 1.0f / std::sqrt(static_cast<float>(d_model)), 0.0f, true)};
}

Tensor Router::logits(const Tensor& x) const {
    if (x.ndim() == 1) return ops::linear(x.reshape({1, x.numel()}), wg, Tensor()).reshape({n_experts()});
    return ops::linear(x, wg, Tensor());
}

double RoutingRecord::retained_weight(std::size_t expert) const {
    for (std::size_t s = 0; s < selected.size(); ++s) {
        if (selected[s] == expert && (retained.empty() || retained[s])) return weights[s];
    }
    return 0.0;
}

namespace {

std::vector<float> row_values(const Tensor& t, std::size_t r) {
    const std::size_t n = t.cols();
    auto d = t.data();
    return std::vector<float>(d.begin() + r * n, d.begin() + (r + 1) * n);
}

}  // namespace

RoutingRecord route(const Tensor& x, const Router& router, std::size_t k, float noise_sigma, Rng* rng) {
    if (x.ndim() != 1) throw DimensionError("route: expects a single token vector");
    if (k < 1 || k > router.n_experts()) throw ArgumentError("route: k outside [1, n_experts]");
    NoGradGuard guard;
    Tensor logits = router.logits(x);
    Tensor probs = ops::softmax(logits);
    Tensor routing = probs;
    if (noise_sigma > 0.0f) {
        if (!rng) throw ArgumentError("route: noise requested without an rng");
        routing = ops::softmax(ops::add(logits, ops::randn(logits.shape(), *rng, noise_sigma)));
    }
    RoutingRecord rec;
    rec.scores = row_values(probs, 0);
    auto top = ops::topk(routing, k);
    rec.selected = top.indices;
    rec.weights = top.values;
    rec.retained.assign(k, 1);
    return rec;
}

Tensor moe_forward(const Tensor& x, const std::vector<Expert>& experts, const RoutingRecord& record,
                   ops::Activation act) {
    if (record.selected.size() != record.weights.size() ||
        (!record.retained.empty() && record.retained.size() != record.selected.size())) {
        throw ArgumentError("moe_forward: inconsistent routing record");
    }
    Tensor y = Tensor::zeros({x.numel()});
    for (std::size_t s = 0; s < record.selected.size(); ++s) {
        if (!record.retained.empty() && !record.retained[s]) continue;
        const std::size_t e = record.selected[s];
        if (e >= experts.size()) {
            throw ArgumentError("moe_forward: record selects expert " + std::to_string(e) + " but only " +
                                std::to_string(experts.size()) + " exist");
        }
        y = ops::add(y, ops::scale(experts[e].forward(x, act), record.weights[s]));
    }
    return y;
}

MoELayer::MoELayer(const MoEConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Rng router_rng = rng.derive(0);
    router_ = Router::init(cfg_.n_experts(), cfg_.d_model, router_rng);
    experts_.reserve(cfg_.n_experts());
    for (std::size_t e = 0; e < cfg_.n_experts(); ++e) {
        Rng er = rng.derive(1 + e);
        experts_.push_back(Expert::init(cfg_.d_model, cfg_.expert_width(), er));
    }
}

MoELayer::Output MoELayer::forward(const Tensor& x, std::span<const std::size_t> offsets, std::size_t layer_id,
                                   const RoutingNoise& noise, const PairFilter* filter) const {
    if (x.ndim() != 2 || x.cols() != cfg_.d_model) {
        throw DimensionError("moe layer: input " + shape_str(x.shape()) + " does not have width " +
                             std::to_string(cfg_.d_model));
    }
    const std::size_t T = x.rows(), N = cfg_.n_experts(), k = cfg_.k();
    Output out;
    out.logits = router_.logits(x);
    out.probs = ops::softmax(out.logits, 1);
    Tensor routing = out.probs;
    if (noise.sigma > 0.0f) {
        if (!noise.rng) throw ArgumentError("moe layer: noise requested without an rng");
        out.noisy_logits = ops::add(out.logits, ops::randn({T, N}, *noise.rng, noise.sigma));
        routing = ops::softmax(out.noisy_logits, 1);
    }

    std::vector<std::vector<std::size_t>> rows_of(N);
    auto probs = out.probs.data();
    auto rdata = routing.data();
    out.records.resize(T);
    const bool segmented = offsets.size() >= 2;
    std::size_t sample = 0;
    for (std::size_t t = 0; t < T; ++t) {
        while (segmented && sample + 2 < offsets.size() && t >= offsets[sample + 1]) ++sample;
        RoutingRecord& rec = out.records[t];
        rec.sample = sample;
        rec.position = segmented ? t - offsets[sample] : t;
        rec.layer = layer_id;
        rec.scores.assign(probs.begin() + t * N, probs.begin() + (t + 1) * N);
        auto top = ops::topk(rdata.subspan(t * N, N), k);
        rec.selected = top.indices;
        rec.weights = top.values;
        rec.retained.assign(k, 1);
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t e = rec.selected[s];
            if (filter && !(*filter)(t, e)) {
                rec.retained[s] = 0;
                continue;
            }
            rows_of[e].push_back(t);
        }
    }

    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> index;
    for (std::size_t e = 0; e < N; ++e) {
        if (rows_of[e].empty()) continue;
        const std::vector<std::size_t> cols(rows_of[e].size(), e);
        Tensor w = ops::pick(routing, rows_of[e], cols);
        Tensor ye = experts_[e].forward(ops::gather_rows(x, rows_of[e]), cfg_.activation);
        parts.push_back(ops::scale_rows(ye, w));
        index.push_back(std::move(rows_of[e]));
    }
    out.y = ops::scatter_add_rows(T, parts, index, cfg_.d_model);
    return out;
}

void MoELayer::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "router.wg", router_.wg, ParamGroup::kRouter);
    for (std::size_t e = 0; e < experts_.size(); ++e) {
        const std::string p = prefix + "expert" + std::to_string(e) + ".";
        fn(p + "w1", experts_[e].w1, ParamGroup::kExperts);
        fn(p + "b1", experts_[e].b1, ParamGroup::kExperts);
        fn(p + "w2", experts_[e].w2, ParamGroup::kExperts);
        fn(p + "b2", experts_[e].b2, ParamGroup::kExperts);
    }
}

}  // namespace s3
