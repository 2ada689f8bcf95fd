#include "s3/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "s3/errors.hpp"

namespace s3 {

using nlohmann::json;

const char* stage_name(Stage s) { return s == Stage::kSpecialization ? "specialization" : "selection"; }

Stage parse_stage(const std::string& s) {
    if (s == "specialization") return Stage::kSpecialization;
    if (s == "selection") return Stage::kSelection;
    throw ConfigError("unknown stage '" + s + "' (expected specialization or selection)");
}

const char* prune_scope_name(PruneScope s) {
    switch (s) {
        case PruneScope::kGlobal: return "global";
        case PruneScope::kPerEncoder: return "per-encoder";
        case PruneScope::kPerLayer: return "per-layer";
    }
    return "unknown";
}

PruneScope parse_prune_scope(const std::string& s) {
    if (s == "global") return PruneScope::kGlobal;
    if (s == "per-encoder") return PruneScope::kPerEncoder;
    if (s == "per-layer") return PruneScope::kPerLayer;
    throw ConfigError("unknown prune scope '" + s + "' (expected global, per-encoder or per-layer)");
}

const char* threshold_mode_name(ThresholdMode m) { return m == ThresholdMode::kPerBatch ? "per-batch" : "fixed"; }

ThresholdMode parse_threshold_mode(const std::string& s) {
    if (s == "per-batch") return ThresholdMode::kPerBatch;
    if (s == "fixed") return ThresholdMode::kFixed;
    throw ConfigError("unknown threshold mode '" + s + "' (expected per-batch or fixed)");
}

void StageConfig::validate() const {
    if (batch_size < 2) throw ConfigError(std::string(stage_name(stage)) + ": batch_size must be at least 2");
    if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate)) {
        throw ConfigError(std::string(stage_name(stage)) + ": learning_rate must be positive");
    }
    if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(grad_clip >= 0.0f)) throw ConfigError("grad_clip must be nonnegative");
    if (!(jitter >= 0.0f)) throw ConfigError("jitter must be nonnegative");
    if (std::isnan(noise_sigma)) throw ConfigError("noise_sigma is NaN");
    weights.validate();
}

void SparsifyConfig::validate() const {
    if (p_grid.empty()) throw ConfigError("sparsify: p_grid is empty");
    for (double p : p_grid) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("sparsify: every p must lie in [0, 1]");
    }
    if (eval_batch_size == 0) throw ConfigError("sparsify: eval_batch_size must be positive");
}

void ProbeConfig::validate() const {
    if (!(l2 >= 0.0)) throw ConfigError("probe: l2 must be nonnegative");
    if (max_iters == 0) throw ConfigError("probe: max_iters must be positive");
    if (!(tolerance > 0.0)) throw ConfigError("probe: tolerance must be positive");
}

EncoderConfig RunConfig::desk_encoder() {
    EncoderConfig e;
    e.d_in = 32;
    e.n_layers = 5;
    e.n_heads = 4;
    e.moe.d_model = 32;
    e.moe.d_ffn = 128;
    e.moe.granularity = 8;
    e.moe.expansion = 8;
    return e;
}

StageConfig RunConfig::default_selection() {
    StageConfig s;
    s.stage = Stage::kSelection;
    s.epochs = 10;
    s.learning_rate = 0.05f;
    return s;
}

void RunConfig::validate() const {
    factors.validate();
    if (task.n_classes < 2) throw ConfigError("task: need at least two classes");
    encoder.validate();
    if (factors.d_in[0] != encoder.d_in || factors.d_in[1] != encoder.d_in) {
        throw ConfigError("encoder.d_in must equal factors.d_in of both modalities");
    }
    if (specialization.stage != Stage::kSpecialization) throw ConfigError("specialization.stage must be specialization");
    if (selection.stage != Stage::kSelection) throw ConfigError("selection.stage must be selection");
    specialization.validate();
    selection.validate();
    sparsify.validate();
    probe.validate();
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    for (std::size_t chi : granularity_sweep) {
        EncoderConfig e = encoder;
        e.moe.granularity = chi;
        e.validate();
    }
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string RunConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(*this).dump())));
    return buf;
}

namespace {

// Shortest decimal that reads back as the same float, stored as a double.
double f2d(float v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    double d = 0.0;
    std::from_chars(buf, end, d);
    return d;
}

class Fields {
public:
    Fields(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw ConfigError(ctx_ + ": expected an object");
    }

    static_assert(std::is_same_v<std::size_t, std::uint64_t>);
    void get(const char* key, std::size_t& out) { visit(key, [&](const json& v) { out = uint_of(v, key); }); }
    void get(const char* key, float& out) { visit(key, [&](const json& v) { out = static_cast<float>(num_of(v, key)); }); }
    void get(const char* key, double& out) { visit(key, [&](const json& v) { out = num_of(v, key); }); }
    void get(const char* key, bool& out) {
        visit(key, [&](const json& v) {
            if (!v.is_boolean()) fail(key, "a boolean");
            out = v.get<bool>();
        });
    }
    void get(const char* key, std::string& out) {
        visit(key, [&](const json& v) {
            if (!v.is_string()) fail(key, "a string");
            out = v.get<std::string>();
        });
    }
    void get(const char* key, std::vector<double>& out) {
        visit(key, [&](const json& v) {
            if (!v.is_array()) fail(key, "an array of numbers");
            out.clear();
            for (const auto& x : v) out.push_back(num_of(x, key));
        });
    }
    template <typename U>
        requires std::is_unsigned_v<U>
    void get(const char* key, std::vector<U>& out) {
        visit(key, [&](const json& v) {
            if (!v.is_array()) fail(key, "an array of nonnegative integers");
            out.clear();
            for (const auto& x : v) out.push_back(static_cast<U>(uint_of(x, key)));
        });
    }
    template <typename T>
    void get_object(const char* key, T& out) {
        visit(key, [&](const json& v) { from_json(v, out); });
    }
    template <typename F>
    void visit(const char* key, F&& f) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            f(j_.at(key));
        } catch (const ConfigError& e) {
            throw ConfigError(ctx_ + "." + key + ": " + e.what());
        }
    }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(ctx_ + ": unknown key '" + key + "'");
        }
    }

private:
    [[noreturn]] void fail(const char* key, const char* what) const {
        throw ConfigError(std::string("expected ") + what + " for '" + key + "'");
    }
    std::uint64_t uint_of(const json& v, const char* key) const {
        if (!v.is_number_unsigned()) fail(key, "a nonnegative integer");
        return v.get<std::uint64_t>();
    }
    double num_of(const json& v, const char* key) const {
        if (!v.is_number()) fail(key, "a number");
        return v.get<double>();
    }

    const json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

}  // namespace

json to_json(const FactorSpec& f) {
    return {{"p_shared", f.p_shared},
            {"p_unique", {f.p_unique[0], f.p_unique[1]}},
            {"seq_len", {f.seq_len[0], f.seq_len[1]}},
            {"d_in", {f.d_in[0], f.d_in[1]}},
            {"embed_noise_sigma", f.embed_noise_sigma}};
}

void from_json(const json& j, FactorSpec& f) {
    Fields r(j, "factors");
    r.get("p_shared", f.p_shared);
    r.visit("p_unique", [&](const json& v) {
        if (!v.is_array() || v.size() != 2) throw ConfigError("expected two distributions");
        for (std::size_t m = 0; m < 2; ++m) {
            f.p_unique[m].clear();
            if (!v[m].is_array()) throw ConfigError("expected an array of numbers");
            for (const auto& x : v[m]) {
                if (!x.is_number()) throw ConfigError("expected an array of numbers");
                f.p_unique[m].push_back(x.get<double>());
            }
        }
    });
    auto pair = [&](const char* key, std::array<std::size_t, 2>& out) {
        r.visit(key, [&](const json& v) {
            if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned()) {
                throw ConfigError("expected two nonnegative integers");
            }
            out = {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
        });
    };
    pair("seq_len", f.seq_len);
    pair("d_in", f.d_in);
    r.get("embed_noise_sigma", f.embed_noise_sigma);
    r.finish();
}

json to_json(const TaskSpec& t) { return {{"mode", task_mode_name(t.mode)}, {"n_classes", t.n_classes}}; }

void from_json(const json& j, TaskSpec& t) {
    Fields r(j, "task");
    std::string mode = task_mode_name(t.mode);
    r.get("mode", mode);
    t.mode = parse_task_mode(mode);
    r.get("n_classes", t.n_classes);
    r.finish();
}

json to_json(const EncoderConfig& e) {
    return {{"d_in", e.d_in},
            {"n_layers", e.n_layers},
            {"n_heads", e.n_heads},
            {"d_model", e.moe.d_model},
            {"d_ffn", e.moe.d_ffn},
            {"chi", e.moe.granularity},
            {"rho", e.moe.expansion},
            {"top_k", e.moe.top_k},
            {"activation", e.moe.activation == ops::Activation::kGelu ? "gelu" : "relu"},
            {"mean_pool", e.mean_pool},
            {"layer_norm", e.layer_norm}};
}

void from_json(const json& j, EncoderConfig& e) {
    Fields r(j, "encoder");
    r.get("d_in", e.d_in);
    r.get("n_layers", e.n_layers);
    r.get("n_heads", e.n_heads);
    r.get("d_model", e.moe.d_model);
    r.get("d_ffn", e.moe.d_ffn);
    r.get("chi", e.moe.granularity);
    r.get("rho", e.moe.expansion);
    r.get("top_k", e.moe.top_k);
    std::string act = e.moe.activation == ops::Activation::kGelu ? "gelu" : "relu";
    r.get("activation", act);
    if (act == "gelu") e.moe.activation = ops::Activation::kGelu;
    else if (act == "relu") e.moe.activation = ops::Activation::kRelu;
    else throw ConfigError("encoder.activation: expected gelu or relu");
    r.get("mean_pool", e.mean_pool);
    r.get("layer_norm", e.layer_norm);
    r.finish();
}

json to_json(const LossWeights& w) {
    return {{"lambda_rep", f2d(w.lambda_rep)},       {"lambda_dsc", f2d(w.lambda_dsc)},
            {"lambda_aux", f2d(w.lambda_aux)},       {"lambda_suff", f2d(w.lambda_suff)},
            {"lambda_min", f2d(w.lambda_min)},       {"lambda_imp", f2d(w.lambda_imp)},
            {"lambda_load", f2d(w.lambda_load)},     {"lambda_local", f2d(w.lambda_local)},
            {"lambda_global", f2d(w.lambda_global)}, {"tau", f2d(w.tau)}};
}

void from_json(const json& j, LossWeights& w) {
    Fields r(j, "weights");
    r.get("lambda_rep", w.lambda_rep);
    r.get("lambda_dsc", w.lambda_dsc);
    r.get("lambda_aux", w.lambda_aux);
    r.get("lambda_suff", w.lambda_suff);
    r.get("lambda_min", w.lambda_min);
    r.get("lambda_imp", w.lambda_imp);
    r.get("lambda_load", w.lambda_load);
    r.get("lambda_local", w.lambda_local);
    r.get("lambda_global", w.lambda_global);
    r.get("tau", w.tau);
    r.finish();
}

json to_json(const StageConfig& s) {
    return {{"stage", stage_name(s.stage)},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"learning_rate", f2d(s.learning_rate)},
            {"momentum", f2d(s.momentum)},
            {"grad_clip", f2d(s.grad_clip)},
            {"noise_sigma", f2d(s.noise_sigma)},
            {"jitter", f2d(s.jitter)},
            {"seed", s.seed},
            {"weights", to_json(s.weights)}};
}

void from_json(const json& j, StageConfig& s) {
    Fields r(j, "stage");
    std::string stage = stage_name(s.stage);
    r.get("stage", stage);
    s.stage = parse_stage(stage);
    r.get("epochs", s.epochs);
    r.get("batch_size", s.batch_size);
    r.get("learning_rate", s.learning_rate);
    r.get("momentum", s.momentum);
    r.get("grad_clip", s.grad_clip);
    r.get("noise_sigma", s.noise_sigma);
    r.get("jitter", s.jitter);
    r.get("seed", s.seed);
    r.get_object("weights", s.weights);
    r.finish();
}

json to_json(const SparsifyConfig& s) {
    return {{"p_grid", s.p_grid},
            {"scope", prune_scope_name(s.scope)},
            {"threshold_mode", threshold_mode_name(s.threshold_mode)},
            {"eval_batch_size", s.eval_batch_size}};
}

void from_json(const json& j, SparsifyConfig& s) {
    Fields r(j, "sparsify");
    r.get("p_grid", s.p_grid);
    std::string scope = prune_scope_name(s.scope), mode = threshold_mode_name(s.threshold_mode);
    r.get("scope", scope);
    r.get("threshold_mode", mode);
    s.scope = parse_prune_scope(scope);
    s.threshold_mode = parse_threshold_mode(mode);
    r.get("eval_batch_size", s.eval_batch_size);
    r.finish();
}

json to_json(const ProbeConfig& p) {
    return {{"l2", p.l2}, {"max_iters", p.max_iters}, {"tolerance", p.tolerance}};
}

void from_json(const json& j, ProbeConfig& p) {
    Fields r(j, "probe");
    r.get("l2", p.l2);
    r.get("max_iters", p.max_iters);
    r.get("tolerance", p.tolerance);
    r.finish();
}

json to_json(const RunConfig& c) {
    return {{"dataset", c.dataset},
            {"factors", to_json(c.factors)},
            {"task", to_json(c.task)},
            {"data", {{"n_train", c.data.n_train}, {"n_test", c.data.n_test}, {"seed", c.data.seed}}},
            {"encoder", to_json(c.encoder)},
            {"specialization", to_json(c.specialization)},
            {"selection", to_json(c.selection)},
            {"sparsify", to_json(c.sparsify)},
            {"probe", to_json(c.probe)},
            {"seeds", c.seeds},
            {"granularity_sweep", c.granularity_sweep}};
}

namespace {

void from_json_data(const json& j, DataConfig& d) {
    Fields r(j, "data");
    r.get("n_train", d.n_train);
    r.get("n_test", d.n_test);
    r.get("seed", d.seed);
    r.finish();
}

}  // namespace

void from_json(const json& j, RunConfig& c) {
    Fields r(j, "config");
    r.get("dataset", c.dataset);
    r.get_object("factors", c.factors);
    r.get_object("task", c.task);
    r.visit("data", [&](const json& v) { from_json_data(v, c.data); });
    r.get_object("encoder", c.encoder);
    r.get_object("specialization", c.specialization);
    r.get_object("selection", c.selection);
    r.get_object("sparsify", c.sparsify);
    r.get_object("probe", c.probe);
    r.get("seeds", c.seeds);
    r.get("granularity_sweep", c.granularity_sweep);
    r.finish();
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    from_json(j, c);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write config " + path);
    out << to_json(cfg).dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace s3
