#include "s3/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "s3/errors.hpp"
#include "s3/losses.hpp"
#include "s3/ops.hpp"

namespace s3 {

DiscreteJoint::DiscreteJoint(std::vector<std::size_t> sizes, std::vector<double> p)
    : sizes_(std::move(sizes)), p_(std::move(p)) {
    std::size_t n = 1;
    for (std::size_t s : sizes_) {
        if (s == 0) throw ArgumentError("joint: every variable needs at least one value");
        n *= s;
    }
    if (p_.size() != n) throw DimensionError("joint: table has " + std::to_string(p_.size()) + " cells, expected " +
                                             std::to_string(n));
    double total = 0.0;
    for (double v : p_) {
        if (!(v >= 0.0)) throw ArgumentError("joint: negative or NaN probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("joint: probabilities sum to " + std::to_string(total));
}

DiscreteJoint DiscreteJoint::empirical(std::vector<std::size_t> sizes,
                                       const std::vector<std::vector<std::size_t>>& samples) {
    if (samples.empty()) throw DegenerateInputError("joint: no samples");
    std::size_t n = 1;
    for (std::size_t s : sizes) n *= s;
    std::vector<double> counts(n, 0.0);
    for (const auto& s : samples) {
        if (s.size() != sizes.size()) throw DimensionError("joint: wrong number of values in sample");
        std::size_t idx = 0;
        for (std::size_t v = 0; v < sizes.size(); ++v) {
            if (s[v] >= sizes[v]) throw ArgumentError("joint: sample value out of range");
            idx = idx * sizes[v] + s[v];
        }
        counts[idx] += 1.0;
    }
    for (double& c : counts) c /= static_cast<double>(samples.size());
    // Renormalize to absorb rounding in the division.
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (double& c : counts) c /= total;
    return DiscreteJoint(std::move(sizes), std::move(counts));
}

std::size_t DiscreteJoint::flat_index(const std::vector<std::size_t>& values) const {
    if (values.size() != sizes_.size()) throw DimensionError("joint: wrong number of values");
    std::size_t idx = 0;
    for (std::size_t v = 0; v < sizes_.size(); ++v) {
        if (values[v] >= sizes_[v]) throw ArgumentError("joint: value out of range");
        idx = idx * sizes_[v] + values[v];
    }
    return idx;
}

std::vector<std::size_t> DiscreteJoint::unflatten(std::size_t index) const {
    std::vector<std::size_t> values(sizes_.size());
    for (std::size_t v = sizes_.size(); v-- > 0;) {
        values[v] = index % sizes_[v];
        index /= sizes_[v];
    }
    return values;
}

std::vector<double> DiscreteJoint::marginal(const std::vector<std::size_t>& vars) const {
    std::size_t n = 1;
    for (std::size_t v : vars) {
        if (v >= sizes_.size()) throw ArgumentError("joint: variable index out of range");
        n *= sizes_[v];
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < p_.size(); ++i) {
        if (p_[i] == 0.0) continue;
        const auto values = unflatten(i);
        std::size_t idx = 0;
        for (std::size_t v : vars) idx = idx * sizes_[v] + values[v];
        out[idx] += p_[i];
    }
    return out;
}

double entropy(const std::vector<double>& dist) {
    double h = 0.0;
    for (double p : dist) {
        if (p < 0.0) throw ArgumentError("entropy: negative probability");
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double entropy(const DiscreteJoint& joint, const std::vector<std::size_t>& vars) {
    if (vars.empty()) return 0.0;
    return entropy(joint.marginal(vars));
}

namespace {

std::vector<std::size_t> concat(std::vector<std::size_t> a, const std::vector<std::size_t>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

double clamp0(double v) { return v < 0.0 && v > -1e-12 ? 0.0 : v; }

}  // namespace

double mutual_information(const DiscreteJoint& joint, const std::vector<std::size_t>& a,
                          const std::vector<std::size_t>& b) {
    return clamp0(entropy(joint, a) + entropy(joint, b) - entropy(joint, concat(a, b)));
}

double conditional_mi(const DiscreteJoint& joint, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                      const std::vector<std::size_t>& c) {
    return clamp0(entropy(joint, concat(a, c)) + entropy(joint, concat(b, c)) - entropy(joint, concat(concat(a, b), c)) -
                  entropy(joint, c));
}

double plugin_mi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.size() != b.size() || a.empty()) throw ArgumentError("plugin_mi: sequences must be nonempty and paired");
    const std::size_t na = *std::max_element(a.begin(), a.end()) + 1;
    const std::size_t nb = *std::max_element(b.begin(), b.end()) + 1;
    std::vector<std::vector<std::size_t>> samples(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) samples[i] = {a[i], b[i]};
    return mutual_information(DiscreteJoint::empirical({na, nb}, samples), {0}, {1});
}

DpiReport verify_dpi(const DiscreteJoint& yxz) {
    if (yxz.n_vars() != 3) throw ArgumentError("verify_dpi: expected a joint over (Y, X, Z)");
    if (conditional_mi(yxz, {0}, {2}, {1}) > 1e-9) {
        throw PreconditionError("verify_dpi: Z depends on Y beyond X (not a Markov chain Y → X → Z)");
    }
    DpiReport r;
    r.i_xy = mutual_information(yxz, {1}, {0});
    r.i_zy = mutual_information(yxz, {2}, {0});
    r.holds = r.i_xy >= r.i_zy - 1e-9;
    r.equality = std::abs(r.i_xy - r.i_zy) <= 1e-9;
    return r;
}

DpiReport verify_dpi(const std::vector<std::vector<double>>& p_yx, const std::vector<std::vector<double>>& p_z_given_x) {
    if (p_yx.empty() || p_z_given_x.empty()) throw ArgumentError("verify_dpi: empty table");
    const std::size_t ny = p_yx.size(), nx = p_yx[0].size(), nz = p_z_given_x[0].size();
    if (p_z_given_x.size() != nx) throw DimensionError("verify_dpi: channel rows must match |X|");
    std::vector<double> p(ny * nx * nz);
    for (std::size_t y = 0; y < ny; ++y) {
        if (p_yx[y].size() != nx) throw DimensionError("verify_dpi: ragged p(y, x)");
        for (std::size_t x = 0; x < nx; ++x) {
            if (p_z_given_x[x].size() != nz) throw DimensionError("verify_dpi: ragged channel");
            for (std::size_t z = 0; z < nz; ++z) p[(y * nx + x) * nz + z] = p_yx[y][x] * p_z_given_x[x][z];
        }
    }
    return verify_dpi(DiscreteJoint({ny, nx, nz}, std::move(p)));
}

namespace {

// Exact joint over (s, u1, u2, y) built from the factor distributions.
DiscreteJoint latent_joint(const FactorSpec& spec, const TaskSpec* task) {
    const std::size_t ns = spec.n_shared(), n1 = spec.n_unique(0), n2 = spec.n_unique(1);
    const std::size_t ny = task ? task->n_classes : 1;
    std::vector<double> p(ns * n1 * n2 * ny, 0.0);
    for (std::size_t s = 0; s < ns; ++s)
        for (std::size_t a = 0; a < n1; ++a)
            for (std::size_t b = 0; b < n2; ++b) {
                const std::size_t y = task ? label({s, a, b}, *task) : 0;
                p[((s * n1 + a) * n2 + b) * ny + y] += spec.p_shared[s] * spec.p_unique[0][a] * spec.p_unique[1][b];
            }
    return DiscreteJoint({ns, n1, n2, ny}, std::move(p));
}

}  // namespace

MiDecompositionReport verify_mi_decomposition(const FactorSpec& spec, std::size_t n_samples, std::uint64_t seed) {
    spec.validate();
    MiDecompositionReport r;
    // X¹ = (s, u1) and X² = (s, u2) as flat symbols over the latent table.
    const std::size_t ns = spec.n_shared(), n1 = spec.n_unique(0), n2 = spec.n_unique(1);
    std::vector<double> p12(ns * n1 * ns * n2, 0.0);
    const DiscreteJoint lat = latent_joint(spec, nullptr);
    for (std::size_t i = 0; i < lat.probs().size(); ++i) {
        const auto v = lat.unflatten(i);
        const std::size_t x1 = v[0] * n1 + v[1], x2 = v[0] * n2 + v[2];
        p12[x1 * (ns * n2) + x2] += lat.probs()[i];
    }
    const DiscreteJoint x12({ns * n1, ns * n2}, std::move(p12));
    r.exact_mi = mutual_information(x12, {0}, {1});
    r.h_shared = entropy(spec.p_shared);
    r.exact_ok = std::abs(r.exact_mi - r.h_shared) <= 1e-9;
    r.n_samples = n_samples;
    if (n_samples > 0) {
        Rng rng(seed);
        std::vector<std::size_t> a(n_samples), b(n_samples);
        for (std::size_t i = 0; i < n_samples; ++i) {
            const Latents z = sample_latents(spec, rng);
            a[i] = z.s * n1 + z.u1;
            b[i] = z.s * n2 + z.u2;
        }
        r.plugin_mi = plugin_mi(a, b);
        r.plugin_ok = std::abs(r.plugin_mi - r.h_shared) <= 0.05;
    }
    return r;
}

ClLimitationReport verify_cl_limitation(const FactorSpec& spec, const TaskSpec& task) {
    spec.validate();
    const DiscreteJoint j = latent_joint(spec, &task);
    ClLimitationReport r;
    r.i_xy = mutual_information(j, {0, 1, 2}, {3});
    r.i_zy = mutual_information(j, {0}, {3});
    r.i_uy = mutual_information(j, {1, 2}, {3});
    r.gap = r.i_xy - r.i_zy;
    if (r.gap <= 1e-12) {
        throw PreconditionError(std::string("verify_cl_limitation: task '") + task_mode_name(task.mode) +
                                "' carries no label information beyond the shared factor");
    }
    r.holds = r.gap >= r.i_uy - 1e-9 && r.gap > 0.0;
    return r;
}

namespace {

Tensor rows_tensor(const std::vector<std::vector<float>>& table, const std::vector<std::size_t>& idx) {
    const std::size_t d = table.at(0).size();
    std::vector<float> data;
    data.reserve(idx.size() * d);
    for (std::size_t i : idx) data.insert(data.end(), table.at(i).begin(), table.at(i).end());
    return ops::l2_normalize_rows(Tensor::from({idx.size(), d}, std::move(data)));
}

BoundStats finish(std::vector<double> estimates, double exact, double tolerance) {
    BoundStats s;
    s.n_batches = estimates.size();
    s.exact_mi = exact;
    s.max_estimate = *std::max_element(estimates.begin(), estimates.end());
    s.mean_estimate = mean_of(estimates);
    s.holds = s.max_estimate <= exact + tolerance;
    return s;
}

}  // namespace

BoundStats bound_gap_infonce(const DiscreteJoint& xz, const std::vector<std::vector<float>>& g,
                             const std::vector<std::vector<float>>& h, float tau, std::size_t batch_size,
                             std::size_t n_batches, std::uint64_t seed, double tolerance) {
    if (xz.n_vars() != 2) throw ArgumentError("bound_gap_infonce: expected a joint over (X, Z)");
    if (g.size() != xz.sizes()[0] || h.size() != xz.sizes()[1]) throw DimensionError("bound_gap_infonce: table sizes");
    if (n_batches == 0) throw ArgumentError("bound_gap_infonce: need at least one batch");
    NoGradGuard guard;
    Rng rng(seed);
    std::vector<double> est;
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::size_t> xs(batch_size), zs(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) {
            const auto v = xz.unflatten(rng.categorical(xz.probs()));
            xs[i] = v[0];
            zs[i] = v[1];
        }
        const double loss = info_nce(rows_tensor(g, xs), rows_tensor(h, zs), tau).item();
        est.push_back(std::log(static_cast<double>(batch_size)) - loss);
    }
    return finish(std::move(est), mutual_information(xz, {0}, {1}), tolerance);
}

BoundStats bound_gap_supcon(const DiscreteJoint& y_code, const std::vector<std::vector<float>>& code_embeddings,
                            float tau, std::size_t batch_size, std::size_t n_batches, std::uint64_t seed,
                            double tolerance) {
    if (y_code.n_vars() != 2) throw ArgumentError("bound_gap_supcon: expected a joint over (Y, code)");
    if (code_embeddings.size() != y_code.sizes()[1]) throw DimensionError("bound_gap_supcon: embedding table size");
    if (n_batches == 0) throw ArgumentError("bound_gap_supcon: need at least one batch");
    NoGradGuard guard;
    Rng rng(seed);
    std::vector<double> est;
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::size_t> ys(batch_size), cs(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) {
            const auto v = y_code.unflatten(rng.categorical(y_code.probs()));
            ys[i] = v[0];
            cs[i] = v[1];
        }
        Tensor z = rows_tensor(code_embeddings, cs);
        const double loss = sup_con(z, z, ys, tau, /*intra_modal=*/false).item();
        est.push_back(std::log(static_cast<double>(batch_size)) - loss);
    }
    return finish(std::move(est), mutual_information(y_code, {0}, {1}), tolerance);
}

EntropySnapshot entropy_snapshot(std::size_t step, std::size_t modality, const std::vector<Tensor>& layer_probs) {
    if (layer_probs.empty()) throw ArgumentError("entropy_snapshot: no layers");
    NoGradGuard guard;
    EntropySnapshot s;
    s.step = step;
    s.modality = modality;
    for (const Tensor& p : layer_probs) {
        s.local_entropy += local_entropy_loss(p).item();
        s.global_neg_entropy += global_entropy_loss(p).item();
    }
    s.local_entropy /= static_cast<double>(layer_probs.size());
    s.global_neg_entropy /= static_cast<double>(layer_probs.size());
    return s;
}

void EntropyMonitor::record(std::size_t step, std::size_t modality, const std::vector<Tensor>& layer_probs) {
    rows_.push_back(entropy_snapshot(step, modality, layer_probs));
}

namespace {

std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

std::string EntropyMonitor::csv() const {
    std::string out = "step,modality,local_entropy,global_neg_entropy\n";
    for (const auto& r : rows_) {
        out += std::to_string(r.step) + "," + std::to_string(r.modality + 1) + "," + fmt(r.local_entropy) + "," +
               fmt(r.global_neg_entropy) + "\n";
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string format_mean_std(const std::vector<double>& values) {
    return fmt(mean_of(values), 2) + "(" + fmt(std_of(values), 2) + ")";
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "dataset,chi,stage,p,accuracy,active_param_pct,trainable_param_pct\n";
    for (const auto& r : rows) {
        out += r.dataset + "," + std::to_string(r.chi) + "," + r.stage + "," + fmt(r.p, 1) + "," +
               format_mean_std(r.accuracy) + "," + fmt(r.active_param_pct, 2) + "," + fmt(r.trainable_param_pct, 4) +
               "\n";
    }
    return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "variant,accuracy\n";
    for (const auto& r : rows) out += r.variant + "," + format_mean_std(r.accuracy) + "\n";
    return out;
}

std::string param_ratio_csv(const std::vector<ParamRatioRow>& rows) {
    std::string out = "chi,trainable_params,total_params,ratio_pct\n";
    for (const auto& r : rows) {
        const double pct = r.total ? 100.0 * static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
        out += std::to_string(r.chi) + "," + std::to_string(r.trainable) + "," + std::to_string(r.total) + "," +
               fmt(pct, 4) + "\n";
    }
    return out;
}

void emit_report(const ReportBundle& results, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create report directory " + dir + ": " + ec.message());
    auto write = [&](const std::string& name, const std::string& text) {
        const auto path = std::filesystem::path(dir) / name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << text;
        if (!out) throw IoError("write failed for " + path.string());
    };
    write("sweep.csv", sweep_csv(results.sweep));
    write("ablation.csv", ablation_csv(results.ablation));
    write("param_ratio.csv", param_ratio_csv(results.param_ratio));
}

}  // namespace s3
