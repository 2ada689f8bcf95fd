#include "s3/synthdata.hpp"

#include <zlib.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "s3/errors.hpp"

namespace s3 {

using nlohmann::json;

FactorSpec FactorSpec::uniform(std::size_t n_shared, std::size_t n_unique1, std::size_t n_unique2) {
    FactorSpec s;
    s.p_shared.assign(n_shared, 1.0 / static_cast<double>(n_shared));
    s.p_unique[0].assign(n_unique1, 1.0 / static_cast<double>(n_unique1));
    s.p_unique[1].assign(n_unique2, 1.0 / static_cast<double>(n_unique2));
    return s;
}

namespace {

void check_dist(const std::vector<double>& p, const char* name) {
    if (p.empty()) throw ConfigError(std::string(name) + ": needs at least one symbol");
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw ConfigError(std::string(name) + ": negative probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError(std::string(name) + ": probabilities must sum to 1");
}

}  // namespace

void FactorSpec::validate() const {
    check_dist(p_shared, "shared factor");
    check_dist(p_unique[0], "unique factor 1");
    check_dist(p_unique[1], "unique factor 2");
    for (std::size_t m = 0; m < 2; ++m) {
        if (seq_len[m] == 0 || d_in[m] == 0) throw ConfigError("seq_len and d_in must be positive");
    }
    if (!(embed_noise_sigma >= 0.0)) throw ConfigError("embed_noise_sigma must be nonnegative");
}

const char* task_mode_name(TaskMode m) {
    switch (m) {
        case TaskMode::kSharedOnly: return "shared-only";
        case TaskMode::kUniqueOnly: return "unique-only";
        case TaskMode::kMixed: return "mixed";
    }
    return "unknown";
}

TaskMode parse_task_mode(const std::string& s) {
    if (s == "shared-only") return TaskMode::kSharedOnly;
    if (s == "unique-only") return TaskMode::kUniqueOnly;
    if (s == "mixed") return TaskMode::kMixed;
    throw ConfigError("unknown task mode '" + s + "' (expected shared-only, unique-only or mixed)");
}

Latents sample_latents(const FactorSpec& spec, Rng& rng) {
    Latents z;
    z.s = rng.categorical(spec.p_shared);
    z.u1 = rng.categorical(spec.p_unique[0]);
    z.u2 = rng.categorical(spec.p_unique[1]);
    return z;
}

Codebooks Codebooks::make(const FactorSpec& spec, Rng& rng) {
    Codebooks b;
    auto draw = [&](std::size_t n, std::size_t d) {
        std::vector<std::vector<float>> book(n, std::vector<float>(d));
        for (auto& v : book)
            for (float& x : v) x = static_cast<float>(rng.normal());
        return book;
    };
    for (std::size_t m = 0; m < 2; ++m) {
        b.shared[m] = draw(spec.n_shared(), spec.d_in[m]);
        b.unique[m] = draw(spec.n_unique(m), spec.d_in[m]);
    }
    return b;
}

MultimodalSample render(const Latents& z, const FactorSpec& spec, const Codebooks& books, Rng& rng) {
    if (z.s >= spec.n_shared() || z.u1 >= spec.n_unique(0) || z.u2 >= spec.n_unique(1)) {
        throw ArgumentError("render: latent symbol out of range");
    }
    MultimodalSample out;
    const std::size_t unique_sym[2] = {z.u1, z.u2};
    for (std::size_t m = 0; m < 2; ++m) {
        const std::size_t T = spec.seq_len[m], d = spec.d_in[m];
        const auto& cs = books.shared[m][z.s];
        const auto& cu = books.unique[m][unique_sym[m]];
        std::vector<float> data(T * d);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < d; ++j) {
                double v = static_cast<double>(cs[j]) + cu[j];
                if (spec.embed_noise_sigma > 0.0) v += rng.normal(0.0, spec.embed_noise_sigma);
                data[t * d + j] = static_cast<float>(v);
            }
        (m == 0 ? out.m1 : out.m2) = Tensor::from({T, d}, std::move(data));
    }
    out.latents = z;
    return out;
}

std::size_t label(const Latents& z, const TaskSpec& task) {
    if (task.n_classes == 0) throw ConfigError("task needs at least one class");
    switch (task.mode) {
        case TaskMode::kSharedOnly: return z.s % task.n_classes;
        case TaskMode::kUniqueOnly: return (z.u1 + z.u2) % task.n_classes;
        case TaskMode::kMixed: return (z.s + z.u1) % task.n_classes;
    }
    throw ConfigError("unknown task mode");
}

Dataset generate(const FactorSpec& spec, const TaskSpec& task, std::size_t n, std::uint64_t seed) {
    spec.validate();
    Rng root(seed);
    Rng book_rng = root.derive(0);
    const Codebooks books = Codebooks::make(spec, book_rng);
    const Rng sample_root = root.derive(1);
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng r = sample_root.derive(i);
        const Latents z = sample_latents(spec, r);
        MultimodalSample s = render(z, spec, books, r);
        s.label = label(z, task);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

json tokens_json(const Tensor& t) {
    json rows = json::array();
    const std::size_t d = t.cols();
    auto data = t.data();
    for (std::size_t r = 0; r < t.rows(); ++r) {
        json row = json::array();
        for (std::size_t j = 0; j < d; ++j) row.push_back(data[r * d + j]);
        rows.push_back(std::move(row));
    }
    return rows;
}

Tensor tokens_from_json(const json& j, const char* key) {
    if (!j.is_array() || j.empty()) throw ParseError(std::string("'") + key + "' must be a nonempty array of rows");
    const std::size_t T = j.size();
    std::size_t d = 0;
    std::vector<float> data;
    for (const auto& row : j) {
        if (!row.is_array() || row.empty()) throw ParseError(std::string("'") + key + "' rows must be nonempty arrays");
        if (d == 0) d = row.size();
        if (row.size() != d) throw ParseError(std::string("'") + key + "' rows have inconsistent widths");
        for (const auto& v : row) {
            if (!v.is_number()) throw ParseError(std::string("'") + key + "' contains a non-number");
            data.push_back(v.get<float>());
        }
    }
    return Tensor::from({T, d}, std::move(data));
}

std::string read_file(const std::string& path) {
    const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    if (gz) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot open " + path);
        std::string out;
        char buf[1 << 16];
        int n;
        while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
        const bool failed = n < 0;
        gzclose(f);
        if (failed) throw IoError("gzip read failed for " + path);
        return out;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    if (gz) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw IoError("cannot open " + path + " for writing");
        const int n = text.empty() ? 0 : gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
        const int rc = gzclose(f);
        if ((!text.empty() && n == 0) || rc != Z_OK) throw IoError("gzip write failed for " + path);
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace

std::string dataset_to_jsonl(const Dataset& data) {
    std::string out;
    for (const auto& s : data) {
        json j;
        j["m1"] = tokens_json(s.m1);
        j["m2"] = tokens_json(s.m2);
        j["y"] = s.label ? json(*s.label) : json(nullptr);
        j["latents"] = s.latents ? json::array({s.latents->s, s.latents->u1, s.latents->u2}) : json(nullptr);
        out += j.dump();
        out += '\n';
    }
    return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
    Dataset out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            if (!j.is_object()) throw ParseError("expected a JSON object");
            for (const auto& [key, _] : j.items()) {
                if (key != "m1" && key != "m2" && key != "y" && key != "latents") {
                    throw ParseError("unknown key '" + key + "'");
                }
            }
            if (!j.contains("m1") || !j.contains("m2")) throw ParseError("missing 'm1' or 'm2'");
            MultimodalSample s;
            s.m1 = tokens_from_json(j["m1"], "m1");
            s.m2 = tokens_from_json(j["m2"], "m2");
            if (j.contains("y") && !j["y"].is_null()) {
                if (!j["y"].is_number_unsigned()) throw ParseError("'y' must be a nonnegative integer or null");
                s.label = j["y"].get<std::size_t>();
            }
            if (j.contains("latents") && !j["latents"].is_null()) {
                const auto& l = j["latents"];
                if (!l.is_array() || l.size() != 3 || !l[0].is_number_unsigned() || !l[1].is_number_unsigned() ||
                    !l[2].is_number_unsigned()) {
                    throw ParseError("'latents' must be [s, u1, u2] or null");
                }
                s.latents = Latents{l[0].get<std::size_t>(), l[1].get<std::size_t>(), l[2].get<std::size_t>()};
            }
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_dataset(const Dataset& data, const std::string& path) { write_file(path, dataset_to_jsonl(data)); }

Dataset read_dataset(const std::string& path) { return dataset_from_jsonl(read_file(path)); }

}  // namespace s3
