#pragma once

#include <cstddef>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "s3/encoder.hpp"
#include "s3/losses.hpp"
#include "s3/synthdata.hpp"

namespace s3 {

enum class Stage { kSpecialization, kSelection };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct StageConfig {
    Stage stage = Stage::kSpecialization;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    float learning_rate = 0.05f;
    float momentum = 0.9f;        // 0 gives plain SGD
    float grad_clip = 1.0f;       // global-norm clip; 0 disables
    float noise_sigma = -1.0f;    // routing noise; negative means 1/N_expert
    float jitter = 0.0f;          // input jitter for the second view
    std::uint64_t seed = 0;
    LossWeights weights;

    void validate() const;
};

enum class PruneScope { kGlobal, kPerEncoder, kPerLayer };
const char* prune_scope_name(PruneScope s);
PruneScope parse_prune_scope(const std::string& s);

enum class ThresholdMode { kPerBatch, kFixed };
const char* threshold_mode_name(ThresholdMode m);
ThresholdMode parse_threshold_mode(const std::string& s);

struct SparsifyConfig {
    std::vector<double> p_grid{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1};
    PruneScope scope = PruneScope::kGlobal;
    ThresholdMode threshold_mode = ThresholdMode::kPerBatch;
    std::size_t eval_batch_size = 256;

    void validate() const;
};

struct ProbeConfig {
    double l2 = 1e-4;
    std::size_t max_iters = 2000;
    double tolerance = 1e-4;  // gradient norm

    void validate() const;
};

struct DataConfig {
    std::size_t n_train = 1024;
    std::size_t n_test = 512;
    std::uint64_t seed = 0;
};

/// Everything that determines a run.
struct RunConfig {
    std::string dataset = "synthetic";
    FactorSpec factors = FactorSpec::uniform(4, 4, 4);
    TaskSpec task;
    DataConfig data;
    EncoderConfig encoder = desk_encoder();
    StageConfig specialization;
    StageConfig selection = default_selection();
    SparsifyConfig sparsify;
    ProbeConfig probe;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::size_t> granularity_sweep;  // empty: encoder.moe.granularity only

    static EncoderConfig desk_encoder();
    static StageConfig default_selection();

    void validate() const;
    /// FNV-1a over the canonical JSON, 16 hex digits.
    std::string hash() const;
};

nlohmann::json to_json(const FactorSpec& f);
nlohmann::json to_json(const TaskSpec& t);
nlohmann::json to_json(const EncoderConfig& e);
nlohmann::json to_json(const LossWeights& w);
nlohmann::json to_json(const StageConfig& s);
nlohmann::json to_json(const SparsifyConfig& s);
nlohmann::json to_json(const ProbeConfig& p);
nlohmann::json to_json(const RunConfig& r);

// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, FactorSpec& f);
void from_json(const nlohmann::json& j, TaskSpec& t);
void from_json(const nlohmann::json& j, EncoderConfig& e);
void from_json(const nlohmann::json& j, LossWeights& w);
void from_json(const nlohmann::json& j, StageConfig& s);
void from_json(const nlohmann::json& j, SparsifyConfig& s);
void from_json(const nlohmann::json& j, ProbeConfig& p);
void from_json(const nlohmann::json& j, RunConfig& r);

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace s3
