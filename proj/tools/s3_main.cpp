// s3: command-line driver for data generation, the three training stages,
// probing, analysis checks and report tables.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "s3/analysis.hpp"
#include "s3/config.hpp"
#include "s3/errors.hpp"
#include "s3/log.hpp"
#include "s3/model.hpp"
#include "s3/pipeline.hpp"
#include "s3/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace s3;

namespace {

struct Options {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::string out;
    std::string p_grid;
    std::size_t chi = 0, rho = 0, topk = 0;
    std::string granularity_sweep;
};

template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::istringstream is(item);
        T v{};
        if (!(is >> v) || !is.eof()) throw ConfigError(std::string(flag) + ": cannot parse '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(flag) + ": empty list");
    return out;
}

RunConfig effective_config(const Options& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    if (!o.seeds.empty()) cfg.seeds = o.seeds;
    if (!o.p_grid.empty()) cfg.sparsify.p_grid = parse_list<double>(o.p_grid, "--p-grid");
    if (o.chi) cfg.encoder.moe.granularity = o.chi;
    if (o.rho) cfg.encoder.moe.expansion = o.rho;
    if (o.topk) cfg.encoder.moe.top_k = o.topk;
    if (!o.granularity_sweep.empty()) {
        cfg.granularity_sweep = parse_list<std::size_t>(o.granularity_sweep, "--granularity-sweep");
    }
    cfg.validate();
    for (std::size_t chi : cfg.granularity_sweep) {
        RunConfig c = cfg;
        c.encoder.moe.granularity = chi;
        c.validate();
    }
    return cfg;
}

class RunDir {
public:
    RunDir(const RunConfig& cfg, const std::string& out) : cfg_(cfg) {
        std::string root = out;
        if (root.empty()) {
            const char* env = std::getenv("S3_RUN_ROOT");
            root = env && *env ? env : "runs";
        }
        dir_ = fs::path(root) / cfg.hash();
        for (const char* sub : {"checkpoints", "logs", "reports", "reports/parts", "data"}) {
            std::error_code ec;
            fs::create_directories(dir_ / sub, ec);
            if (ec) throw IoError("cannot create " + (dir_ / sub).string() + ": " + ec.message());
        }
        save_run_config(cfg, (dir_ / "config.json").string());
    }

    const fs::path& dir() const { return dir_; }
    fs::path path(const std::string& rel) const { return dir_ / rel; }

    static std::string tag(std::size_t chi, std::uint64_t seed) {
        return "chi" + std::to_string(chi) + "_seed" + std::to_string(seed);
    }
    fs::path checkpoint(std::size_t chi, std::uint64_t seed, const std::string& stage) const {
        return dir_ / "checkpoints" / (tag(chi, seed) + "_" + stage + ".json");
    }
    fs::path part(const std::string& name) const { return dir_ / "reports" / "parts" / (name + ".json"); }

    /// χ values of the run: the sweep list, or the encoder's own.
    std::vector<std::size_t> chis() const {
        if (cfg_.granularity_sweep.empty()) return {cfg_.encoder.moe.granularity};
        return cfg_.granularity_sweep;
    }
    RunConfig at_chi(std::size_t chi) const {
        RunConfig c = cfg_;
        c.encoder.moe.granularity = chi;
        return c;
    }

private:
    RunConfig cfg_;
    fs::path dir_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path, const char* hint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError(path.string() + " not found; " + hint);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::pair<Dataset, Dataset> load_splits(const RunDir& run) {
    const auto train = run.path("data/train.jsonl"), test = run.path("data/test.jsonl");
    if (!fs::exists(train) || !fs::exists(test)) {
        throw MissingArtifactError("dataset not found under " + run.path("data").string() + "; run gen-data first");
    }
    return {read_dataset(train.string()), read_dataset(test.string())};
}

S3Model load_stage(const RunDir& run, std::size_t chi, std::uint64_t seed, const std::string& stage,
                   const char* hint) {
    const auto path = run.checkpoint(chi, seed, stage);
    if (!fs::exists(path)) throw MissingArtifactError(stage + " checkpoint not found: " + path.string() + "; " + hint);
    std::string found;
    S3Model model = load_checkpoint(path.string(), &found);
    if (found != stage) throw MissingArtifactError(path.string() + " holds a '" + found + "' checkpoint, not " + stage);
    return model;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void say(const char* fmt, auto... args) {
    std::printf(fmt, args...);
    std::printf("\n");
    std::fflush(stdout);
}

// Commands

void cmd_gen_data(const RunConfig& cfg, const RunDir& run) {
    auto [train, test] = make_splits(cfg);
    write_dataset(train, run.path("data/train.jsonl").string());
    write_dataset(test, run.path("data/test.jsonl").string());
    say("gen-data: %zu train, %zu test samples -> %s", train.size(), test.size(), run.path("data").c_str());
}

void store_probe(const RunDir& run, const std::string& tag, const std::string& stage, double acc) {
    write_text(run.part(tag + "_" + stage), json({{"stage", stage}, {"accuracy", acc}}).dump(2) + "\n");
}

void cmd_pretrain(const RunConfig& cfg, const RunDir& run) {
    auto [train, test] = load_splits(run);
    for (std::size_t chi : run.chis()) {
        const RunConfig c = run.at_chi(chi);
        for (std::uint64_t seed : c.seeds) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::string tag = RunDir::tag(chi, seed);
            S3Model model(c.encoder, seed);
            StageConfig spec = c.specialization;
            spec.seed = seed;
            const TrainLog log = train_specialization(model, train, spec);
            save_checkpoint(model, "specialization", run.checkpoint(chi, seed, "specialization").string());
            write_text(run.path("logs/" + tag + "_specialization.csv"), log.csv());
            const double acc =
                linear_probe(model, train, test, c.probe, {seed}, c.sparsify.eval_batch_size).mean;
            store_probe(run, tag, "specialization", acc);
            say("pretrain %s: %zu steps, probe accuracy %.4f (%.1f s)", tag.c_str(), log.rows.size(), acc,
                seconds_since(t0));
        }
    }
}

void cmd_select(const RunConfig& cfg, const RunDir& run) {
    // Fail before any data work when a checkpoint is missing.
    for (std::size_t chi : run.chis())
        for (std::uint64_t seed : cfg.seeds) load_stage(run, chi, seed, "specialization", "run pretrain first");
    auto [train, test] = load_splits(run);
    for (std::size_t chi : run.chis()) {
        const RunConfig c = run.at_chi(chi);
        for (std::uint64_t seed : c.seeds) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::string tag = RunDir::tag(chi, seed);
            S3Model model = load_stage(run, chi, seed, "specialization", "run pretrain first");
            StageConfig sel = c.selection;
            sel.seed = seed;
            const SelectionResult res = train_selection(model, train, sel);
            save_checkpoint(model, "selection", run.checkpoint(chi, seed, "selection").string());
            write_text(run.path("logs/" + tag + "_selection.csv"), res.log.csv());
            write_text(run.path("logs/" + tag + "_entropy.csv"), res.entropy.csv());
            const double acc =
                linear_probe(model, train, test, c.probe, {seed}, c.sparsify.eval_batch_size).mean;
            store_probe(run, tag, "selection", acc);
            say("select %s: %zu steps, probe accuracy %.4f (%.1f s)", tag.c_str(), res.log.rows.size(), acc,
                seconds_since(t0));
        }
    }
}

void cmd_sparsify(const RunConfig& cfg, const RunDir& run, const std::string& stage) {
    for (std::size_t chi : run.chis())
        for (std::uint64_t seed : cfg.seeds) load_stage(run, chi, seed, stage, "run the earlier stages first");
    auto [train, test] = load_splits(run);
    for (std::size_t chi : run.chis()) {
        const RunConfig c = run.at_chi(chi);
        for (std::uint64_t seed : c.seeds) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::string tag = RunDir::tag(chi, seed);
            const S3Model model = load_stage(run, chi, seed, stage, "run the earlier stages first");
            const auto pts = sparsify_sweep(model, train, test, c.sparsify, c.probe, seed);
            json arr = json::array();
            std::string csv = "p,accuracy,active_param_pct,retained_pairs,routed_pairs\n";
            for (const auto& pt : pts) {
                arr.push_back({{"p", pt.p},
                               {"accuracy", pt.accuracy},
                               {"active_param_pct", pt.active_param_pct},
                               {"retained_pairs", pt.retained_pairs},
                               {"routed_pairs", pt.routed_pairs}});
                char buf[160];
                std::snprintf(buf, sizeof buf, "%.2f,%.6f,%.4f,%zu,%zu\n", pt.p, pt.accuracy, pt.active_param_pct,
                              pt.retained_pairs, pt.routed_pairs);
                csv += buf;
            }
            write_text(run.part(tag + "_sweep"), json({{"stage", stage}, {"points", arr}}).dump(2) + "\n");
            write_text(run.path("reports/" + tag + "_sweep.csv"), csv);
            double best = 0.0;
            for (const auto& pt : pts) best = std::max(best, pt.accuracy);
            say("sparsify %s: %zu points, best accuracy %.4f (%.1f s)", tag.c_str(), pts.size(), best,
                seconds_since(t0));
        }
    }
}

void cmd_probe(const RunConfig& cfg, const RunDir& run, const std::string& stage) {
    for (std::size_t chi : run.chis())
        for (std::uint64_t seed : cfg.seeds) load_stage(run, chi, seed, stage, "run the earlier stages first");
    auto [train, test] = load_splits(run);
    json out = json::array();
    for (std::size_t chi : run.chis()) {
        const RunConfig c = run.at_chi(chi);
        std::vector<double> accs;
        for (std::uint64_t seed : c.seeds) {
            const S3Model model = load_stage(run, chi, seed, stage, "");
            const double acc = linear_probe(model, train, test, c.probe, {seed}, c.sparsify.eval_batch_size).mean;
            store_probe(run, RunDir::tag(chi, seed), stage, acc);
            accs.push_back(acc);
        }
        out.push_back({{"stage", stage}, {"chi", chi}, {"per_seed", accs}, {"mean", mean_of(accs)},
                       {"std", std_of(accs)}});
    }
    std::cout << out.dump(2) << "\n";
}

bool cmd_verify(const RunConfig& cfg, const RunDir& run) {
    const auto checks = analysis_checks(cfg.seeds.empty() ? 0 : cfg.seeds.front());
    json arr = json::array();
    std::size_t passed = 0;
    for (const auto& c : checks) {
        say("%-26s %s  %s", c.name.c_str(), c.passed ? "PASS" : "FAIL", c.detail.c_str());
        arr.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        passed += c.passed;
    }
    say("verify: %zu/%zu checks passed", passed, checks.size());
    write_text(run.path("reports/verify.json"), arr.dump(2) + "\n");
    return passed == checks.size();
}

void cmd_ablate(const RunConfig& cfg, const RunDir& run) {
    auto [train, test] = load_splits(run);
    json parts = json::object();
    for (std::size_t chi : run.chis()) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto rows = run_ablation(run.at_chi(chi), train, test);
        json j = json::array();
        for (const auto& r : rows) {
            j.push_back({{"variant", r.variant}, {"accuracy", r.accuracy}});
            say("ablate chi%zu %-9s %s", chi, r.variant.c_str(), format_mean_std(r.accuracy).c_str());
        }
        parts[std::to_string(chi)] = std::move(j);
        say("ablate chi%zu done (%.1f s)", chi, seconds_since(t0));
    }
    write_text(run.part("ablation"), parts.dump(2) + "\n");
}

std::string markdown_tables(const ReportBundle& b) {
    std::string md = "# Results\n\nAccuracy: mean(std) over seeds, percent.\n\n";
    md += "| dataset | chi | stage | p | accuracy | active params % | trainable params % |\n";
    md += "|---|---|---|---|---|---|---|\n";
    char buf[256];
    for (const auto& r : b.sweep) {
        std::snprintf(buf, sizeof buf, "| %s | %zu | %s | %.1f | %s | %.2f | %.4f |\n", r.dataset.c_str(), r.chi,
                      r.stage.c_str(), r.p, format_mean_std(r.accuracy).c_str(), r.active_param_pct,
                      r.trainable_param_pct);
        md += buf;
    }
    if (!b.ablation.empty()) {
        md += "\n| router loss | accuracy |\n|---|---|\n";
        for (const auto& r : b.ablation) md += "| " + r.variant + " | " + format_mean_std(r.accuracy) + " |\n";
    }
    md += "\n| chi | trainable | total | ratio % |\n|---|---|---|---|\n";
    for (const auto& r : b.param_ratio) {
        std::snprintf(buf, sizeof buf, "| %zu | %zu | %zu | %.4f |\n", r.chi, r.trainable, r.total,
                      100.0 * static_cast<double>(r.trainable) / static_cast<double>(r.total));
        md += buf;
    }
    return md;
}

void cmd_report(const RunConfig& cfg, const RunDir& run) {
    ReportBundle bundle;
    const char* hint = "run the earlier stages first";
    for (std::size_t chi : run.chis()) {
        const RunConfig c = run.at_chi(chi);
        const ParamRatioRow ratio = trainable_ratio(c.encoder);
        bundle.param_ratio.push_back(ratio);
        const double ratio_pct = 100.0 * static_cast<double>(ratio.trainable) / static_cast<double>(ratio.total);
        SweepRow spec{cfg.dataset, chi, "specialization", 1.0, {}, 100.0, 100.0};
        SweepRow sel{cfg.dataset, chi, "selection", 1.0, {}, 100.0, ratio_pct};
        std::map<double, SweepRow, std::greater<>> sparse;
        std::map<double, std::vector<double>> active;
        for (std::uint64_t seed : c.seeds) {
            const std::string tag = RunDir::tag(chi, seed);
            spec.accuracy.push_back(100.0 * read_json(run.part(tag + "_specialization"), hint)["accuracy"].get<double>());
            sel.accuracy.push_back(100.0 * read_json(run.part(tag + "_selection"), hint)["accuracy"].get<double>());
            const json sweep = read_json(run.part(tag + "_sweep"), hint);
            for (const auto& pt : sweep.at("points")) {
                const double p = pt["p"].get<double>();
                auto& row = sparse.try_emplace(p, SweepRow{cfg.dataset, chi, "sparsify", p, {}, 0.0, 0.0}).first->second;
                row.accuracy.push_back(100.0 * pt["accuracy"].get<double>());
                active[p].push_back(pt["active_param_pct"].get<double>());
            }
        }
        bundle.sweep.push_back(spec);
        bundle.sweep.push_back(sel);
        for (auto& [p, row] : sparse) {
            row.active_param_pct = mean_of(active[p]);
            bundle.sweep.push_back(row);
        }
    }
    if (fs::exists(run.part("ablation"))) {
        const json parts = read_json(run.part("ablation"), "");
        for (std::size_t chi : run.chis()) {
            const auto key = std::to_string(chi);
            if (!parts.contains(key)) continue;
            for (const auto& r : parts[key]) {
                AblationRow row{r["variant"].get<std::string>(), r["accuracy"].get<std::vector<double>>()};
                if (run.chis().size() > 1) row.variant = "chi" + key + ":" + row.variant;
                bundle.ablation.push_back(std::move(row));
            }
        }
    }
    emit_report(bundle, run.path("reports").string());
    write_text(run.path("reports/tables.md"), markdown_tables(bundle));
    say("report: %zu sweep rows, %zu ablation rows -> %s", bundle.sweep.size(), bundle.ablation.size(),
        run.path("reports").c_str());
}

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json({{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}).dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"s3: sparse mixture-of-experts multimodal representation learning"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON run configuration (missing keys take defaults)");
        sub->add_option("--seed", o.seeds, "Run only these seeds (repeatable); overrides config seeds");
        sub->add_option("--out", o.out, "Output root; the run directory is <out>/<config-hash>");
        sub->add_option("--chi", o.chi, "Granularity: shards per dense FFN");
        sub->add_option("--rho", o.rho, "Expansion ratio; experts = chi * rho");
        sub->add_option("--topk", o.topk, "Experts per token (default: chi)");
        sub->add_option("--p-grid", o.p_grid, "Preservation ratios, comma separated, e.g. 1,0.5,0.1");
        sub->add_option("--granularity-sweep", o.granularity_sweep, "Granularities to run, comma separated");
    };
    struct Cmd {
        const char* name;
        const char* help;
    };
    const Cmd cmds[] = {
        {"gen-data", "Generate train/test splits from the factor model"},
        {"pretrain", "Specialization: train every parameter on unlabeled pairs"},
        {"select", "Selection: fine-tune routers only on labelled data"},
        {"sparsify", "Sparsification sweep over preservation ratios"},
        {"probe", "Linear-probe a stage's checkpoints"},
        {"verify", "Run the information-theoretic analysis checks"},
        {"ablate", "Router loss ablation (none, suff+min, suff, min)"},
        {"report", "Merge stage results into report tables"},
        {"run", "gen-data, pretrain, select, sparsify and report in one go"},
        {"config", "Print the effective configuration as JSON"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& c : cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub);
        subs[c.name] = sub;
    }
    std::string sparsify_stage = "selection", probe_stage = "selection";
    subs["sparsify"]
        ->add_option("--stage", sparsify_stage, "Checkpoint stage to sparsify")
        ->check(CLI::IsMember({"specialization", "selection"}))
        ->capture_default_str();
    subs["probe"]
        ->add_option("--stage", probe_stage, "Checkpoint stage to probe")
        ->check(CLI::IsMember({"specialization", "selection"}))
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 1);
    }

    try {
        const RunConfig cfg = effective_config(o);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "config") {
            std::cout << to_json(cfg).dump(2) << "\n";
            return 0;
        }
        const RunDir run(cfg, o.out);
        if (cmd == "gen-data") cmd_gen_data(cfg, run);
        else if (cmd == "pretrain") cmd_pretrain(cfg, run);
        else if (cmd == "select") cmd_select(cfg, run);
        else if (cmd == "sparsify") cmd_sparsify(cfg, run, sparsify_stage);
        else if (cmd == "probe") cmd_probe(cfg, run, probe_stage);
        else if (cmd == "verify") {
            if (!cmd_verify(cfg, run)) return fail("check_failed", "some analysis checks failed", 2);
        } else if (cmd == "ablate") cmd_ablate(cfg, run);
        else if (cmd == "report") cmd_report(cfg, run);
        else if (cmd == "run") {
            cmd_gen_data(cfg, run);
            cmd_pretrain(cfg, run);
            cmd_select(cfg, run);
            cmd_sparsify(cfg, run, "selection");
            cmd_report(cfg, run);
        }
        say("run directory: %s", run.dir().c_str());
        return 0;
    } catch (const ConfigError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const MissingArtifactError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const ParseError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const IoError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const PreconditionError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const ArgumentError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const DegenerateInputError& e) {
        return fail(e.kind(), e.what(), 1);
    } catch (const Error& e) {
        return fail(e.kind(), e.what(), 2);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 2);
    }
}
