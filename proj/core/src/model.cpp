#include "s3/model.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "s3/config.hpp"
#include "s3/errors.hpp"

namespace s3 {

using nlohmann::json;

S3Model::S3Model(const EncoderConfig& cfg, std::uint64_t seed) : config(cfg) {
    Rng root(seed);
    for (std::size_t m = 0; m < 2; ++m) {
        Rng r = root.derive(m);
        enc[m] = Encoder(cfg, m, r);
    }
}

std::vector<NamedParam> S3Model::parameters() {
    std::vector<NamedParam> out = enc[0].parameters("m1.");
    auto second = enc[1].parameters("m2.");
    out.insert(out.end(), second.begin(), second.end());
    return out;
}

std::vector<Tensor> S3Model::router_parameters() {
    std::vector<Tensor> out;
    for (auto& p : parameters()) {
        if (p.group == ParamGroup::kRouter) out.push_back(p.tensor);
    }
    return out;
}

ParamCount S3Model::count(ParamGroup g) const {
    ParamCount c = enc[0].count(g);
    c += enc[1].count(g);
    return c;
}

ParamCount S3Model::total_count() const {
    ParamCount c = enc[0].total_count();
    c += enc[1].total_count();
    return c;
}

S3Model S3Model::deep_copy() const {
    S3Model m;
    m.config = config;
    m.enc = {enc[0].deep_copy(), enc[1].deep_copy()};
    return m;
}

std::string checkpoint_to_json(S3Model& model, const std::string& stage) {
    json tensors = json::array();
    for (const auto& p : model.parameters()) {
        json t;
        t["name"] = p.name;
        t["shape"] = p.tensor.shape();
        json data = json::array();
        // nlohmann writes floats with the shortest representation that
        // reads back to the same value.
        for (float v : p.tensor.data()) data.push_back(v);
        t["data"] = std::move(data);
        tensors.push_back(std::move(t));
    }
    json j = {{"format", "s3-checkpoint"},
              {"version", 1},
              {"stage", stage},
              {"encoder", to_json(model.config)},
              {"tensors", std::move(tensors)}};
    return j.dump();
}

S3Model checkpoint_from_json(const std::string& text, std::string* stage) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "s3-checkpoint") throw ParseError("not an s3 checkpoint");
    if (j.value("version", 0) != 1) throw ParseError("unsupported checkpoint version");
    if (!j.contains("encoder") || !j.contains("tensors") || !j["tensors"].is_array()) {
        throw ParseError("checkpoint is missing 'encoder' or 'tensors'");
    }
    EncoderConfig cfg;
    from_json(j["encoder"], cfg);
    S3Model model(cfg, 0);
    std::map<std::string, Tensor> by_name;
    for (auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);
    std::size_t loaded = 0;
    for (const auto& t : j["tensors"]) {
        const std::string name = t.value("name", "");
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ParseError("checkpoint has unknown tensor '" + name + "'");
        if (!t.contains("shape") || t["shape"].get<Shape>() != it->second.shape()) {
            throw ParseError("checkpoint tensor '" + name + "' has the wrong shape");
        }
        const auto& data = t["data"];
        auto dst = it->second.mutable_data();
        if (!data.is_array() || data.size() != dst.size()) throw ParseError("checkpoint tensor '" + name + "' size");
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (!data[i].is_number()) throw ParseError("checkpoint tensor '" + name + "' has a non-number");
            dst[i] = data[i].get<float>();
        }
        ++loaded;
    }
    if (loaded != by_name.size()) throw ParseError("checkpoint is missing tensors");
    if (stage) *stage = j.value("stage", "");
    return model;
}

void save_checkpoint(S3Model& model, const std::string& stage, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out << checkpoint_to_json(model, stage) << '\n';
    if (!out) throw IoError("write failed for " + path);
}

S3Model load_checkpoint(const std::string& path, std::string* stage) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("checkpoint not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_json(ss.str(), stage);
}

std::uint64_t parameter_hash(S3Model& model, const std::vector<ParamGroup>& groups) {
    std::string bytes;
    for (const auto& p : model.parameters()) {
        bool keep = false;
        for (ParamGroup g : groups) keep = keep || g == p.group;
        if (!keep) continue;
        bytes += p.name;
        auto d = p.tensor.data();
        bytes.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
    }
    return fnv1a64(bytes);
}

}  // namespace s3
