#include "s3/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "s3/errors.hpp"

namespace s3 {

void EncoderConfig::validate() const {
    moe.validate();
    if (d_in == 0) throw ConfigError("encoder: d_in must be positive");
    if (n_layers == 0) throw ConfigError("encoder: n_layers must be positive");
    if (n_heads == 0 || d_model() % n_heads != 0) {
        throw ConfigError("encoder: d_model " + std::to_string(d_model()) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

std::vector<float> positional_encoding(std::size_t position, std::size_t d_model) {
    std::vector<float> pe(d_model);
    for (std::size_t i = 0; i < d_model; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
        const double a = static_cast<double>(position) * freq;
        pe[i] = static_cast<float>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
    return pe;
}

namespace {

Tensor init_weight(std::size_t out, std::size_t in, Rng& rng) {
    return ops::randn({out, in}, rng, 1.0f / std::sqrt(static_cast<float>(in)), 0.0f, true);
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, std::size_t modality, Rng& rng) : cfg_(cfg), modality_(modality) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model();
    Rng pr = rng.derive(0);
    proj_w = init_weight(d, cfg_.d_in, pr);
    proj_b = Tensor::zeros({d}, true);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        Rng ar = rng.derive(100 + l);
        Block b;
        b.ln1_g = Tensor::full({d}, 1.0f, true);
        b.ln1_b = Tensor::zeros({d}, true);
        b.wq = init_weight(d, d, ar);
        b.wk = init_weight(d, d, ar);
        b.wv = init_weight(d, d, ar);
        b.wo = init_weight(d, d, ar);
        b.bq = Tensor::zeros({d}, true);
        b.bk = Tensor::zeros({d}, true);
        b.bv = Tensor::zeros({d}, true);
        b.bo = Tensor::zeros({d}, true);
        b.ln2_g = Tensor::full({d}, 1.0f, true);
        b.ln2_b = Tensor::zeros({d}, true);
        blocks_.push_back(std::move(b));
        Rng mr = rng.derive(200 + l);
        moe_.emplace_back(cfg_.moe, mr);
    }
}

EncodedBatch Encoder::encode(const std::vector<Tensor>& samples, const EncodeOptions& opts) const {
    if (samples.empty()) throw DegenerateInputError("encode: empty batch");
    const std::size_t d = cfg_.d_model();
    EncodedBatch out;
    out.modality = modality_;
    out.offsets.push_back(0);
    std::vector<float> flat;
    std::vector<float> pos;
    for (const Tensor& s : samples) {
        if (s.ndim() != 2 || s.rows() == 0) throw DegenerateInputError("encode: empty token sequence");
        if (s.cols() != cfg_.d_in) {
            throw DimensionError("encode: token width " + std::to_string(s.cols()) + " != d_in " +
                                 std::to_string(cfg_.d_in));
        }
        auto sd = s.data();
        flat.insert(flat.end(), sd.begin(), sd.end());
        for (std::size_t t = 0; t < s.rows(); ++t) {
            auto pe = positional_encoding(t, d);
            pos.insert(pos.end(), pe.begin(), pe.end());
        }
        out.offsets.push_back(out.offsets.back() + s.rows());
    }
    const std::size_t T = out.offsets.back();
    if (opts.jitter > 0.0f) {
        if (!opts.jitter_rng) throw ArgumentError("encode: input jitter requested without an rng");
        for (float& v : flat) v += static_cast<float>(opts.jitter_rng->normal(0.0, opts.jitter));
    }
    Tensor tokens = Tensor::from({T, cfg_.d_in}, std::move(flat));
    Tensor x = ops::add(ops::linear(tokens, proj_w, proj_b), Tensor::from({T, d}, std::move(pos)));

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Block& b = blocks_[l];
        Tensor h = cfg_.layer_norm ? ops::layer_norm_rows(x, b.ln1_g, b.ln1_b) : x;
        Tensor att = ops::attention(ops::linear(h, b.wq, b.bq), ops::linear(h, b.wk, b.bk), ops::linear(h, b.wv, b.bv),
                                    out.offsets, cfg_.n_heads);
        x = ops::add(x, ops::linear(att, b.wo, b.bo));
        Tensor h2 = cfg_.layer_norm ? ops::layer_norm_rows(x, b.ln2_g, b.ln2_b) : x;
        PairFilter pf;
        if (opts.filter) {
            const LayerPairFilter& f = *opts.filter;
            pf = [&f, l](std::size_t row, std::size_t e) { return f(l, row, e); };
        }
        auto moe_out = moe_[l].forward(h2, out.offsets, l, opts.noise, opts.filter ? &pf : nullptr);
        x = ops::add(x, moe_out.y);
        out.layers.push_back(std::move(moe_out));
    }

    Tensor pooled;
    if (cfg_.mean_pool) {
        pooled = ops::segment_mean_rows(x, out.offsets);
    } else {
        std::vector<std::size_t> first(out.offsets.begin(), out.offsets.end() - 1);
        pooled = ops::gather_rows(x, first);
    }
    out.z = ops::l2_normalize_rows(pooled);
    return out;
}

SampleEmbedding EncodedBatch::sample(std::size_t b) const {
    if (b >= batch_size()) throw ArgumentError("sample index out of range");
    SampleEmbedding e;
    e.modality = modality;
    const std::size_t d = z.cols();
    e.z.assign(z.data().begin() + b * d, z.data().begin() + (b + 1) * d);
    for (const auto& layer : layers) {
        for (std::size_t t = offsets[b]; t < offsets[b + 1]; ++t) e.routing.push_back(layer.records[t]);
    }
    return e;
}

SampleEmbedding Encoder::encode_one(const Tensor& tokens, const EncodeOptions& opts) const {
    return encode({tokens}, opts).sample(0);
}

void Encoder::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "proj.w", proj_w, ParamGroup::kInputProjection);
    fn(prefix + "proj.b", proj_b, ParamGroup::kInputProjection);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        Block& b = blocks_[l];
        const std::string p = prefix + "layer" + std::to_string(l) + ".";
        const ParamGroup g = ParamGroup::kAttention;
        fn(p + "ln1.g", b.ln1_g, g);
        fn(p + "ln1.b", b.ln1_b, g);
        fn(p + "attn.wq", b.wq, g);
        fn(p + "attn.bq", b.bq, g);
        fn(p + "attn.wk", b.wk, g);
        fn(p + "attn.bk", b.bk, g);
        fn(p + "attn.wv", b.wv, g);
        fn(p + "attn.bv", b.bv, g);
        fn(p + "attn.wo", b.wo, g);
        fn(p + "attn.bo", b.bo, g);
        fn(p + "ln2.g", b.ln2_g, g);
        fn(p + "ln2.b", b.ln2_b, g);
        moe_[l].visit_parameters(p + "moe.", fn);
    }
}

std::vector<NamedParam> Encoder::parameters(const std::string& prefix) {
    std::vector<NamedParam> out;
    visit_parameters(prefix, [&](const std::string& n, Tensor& t, ParamGroup g) { out.push_back({n, t, g}); });
    return out;
}

ParamCount Encoder::count(ParamGroup group) const {
    ParamCount c;
    const_cast<Encoder*>(this)->visit_parameters("", [&](const std::string&, Tensor& t, ParamGroup g) {
        if (g != group) return;
        (t.ndim() == 2 ? c.weights : c.biases) += t.numel();
    });
    return c;
}

ParamCount Encoder::total_count() const {
    ParamCount c;
    for (ParamGroup g : {ParamGroup::kInputProjection, ParamGroup::kAttention, ParamGroup::kExperts,
                         ParamGroup::kRouter}) {
        c += count(g);
    }
    return c;
}

Encoder Encoder::deep_copy() const {
    Encoder copy = *this;
    copy.visit_parameters("", [](const std::string&, Tensor& t, ParamGroup) { t = t.clone(t.requires_grad()); });
    return copy;
}

ConceptActivation active_concepts(const SampleEmbedding& emb, double epsilon) {
    if (emb.routing.empty()) throw PreconditionError("active_concepts: no routing records");
    const std::size_t n = emb.routing.front().scores.size();
    ConceptActivation a;
    a.masses.assign(n, 0.0);
    for (const auto& rec : emb.routing) {
        for (std::size_t s = 0; s < rec.selected.size(); ++s) {
            if (!rec.retained.empty() && !rec.retained[s]) continue;
            a.masses[rec.selected[s]] += rec.weights[s];
        }
    }
    for (std::size_t c = 0; c < n; ++c) {
        a.masses[c] /= static_cast<double>(emb.routing.size());
        if (a.masses[c] > epsilon) a.active_set.push_back(c);
    }
    return a;
}

namespace {

constexpr std::size_t kDscBins = 16;

bool is_active(const ConceptActivation& a, std::size_t c) {
    for (std::size_t x : a.active_set) {
        if (x == c) return true;
    }
    return false;
}

std::vector<double> mass_histogram(const std::vector<ConceptActivation>& acts, std::size_t c) {
    std::vector<double> h(kDscBins, 0.0);
    double n = 0.0;
    for (const auto& a : acts) {
        if (c >= a.masses.size() || !is_active(a, c)) continue;
        const double m = std::clamp(a.masses[c], 0.0, 1.0);
        const auto bin = std::min(kDscBins - 1, static_cast<std::size_t>(m * kDscBins));
        h[bin] += 1.0;
        n += 1.0;
    }
    if (n > 0.0) {
        for (double& v : h) v /= n;
    }
    return h;
}

}  // namespace

double dsc_divergence(const std::vector<ConceptActivation>& acts_m1, const std::vector<ConceptActivation>& acts_m2,
                      std::size_t concept_id) {
    const auto p = mass_histogram(acts_m1, concept_id);
    const auto q = mass_histogram(acts_m2, concept_id);
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < kDscBins; ++i) {
        sp += p[i];
        sq += q[i];
    }
    if (sp == 0.0 && sq == 0.0) {
        throw NotShareableError("concept " + std::to_string(concept_id) + " is active in neither modality");
    }
    if (sp == 0.0 || sq == 0.0) {
        throw PreconditionError("concept " + std::to_string(concept_id) + " is active in only one modality");
    }
    double js = 0.0;
    for (std::size_t i = 0; i < kDscBins; ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
    }
    return std::max(0.0, js);
}

}  // namespace s3
