#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s3/rng.hpp"
#include "s3/tensor.hpp"

namespace s3 {

/// Latent factor model: a shared factor X_S and one unique factor per
/// modality, sampled independently from their categorical distributions.
struct FactorSpec {
    std::vector<double> p_shared;
    std::array<std::vector<double>, 2> p_unique;
    std::array<std::size_t, 2> seq_len{4, 4};
    std::array<std::size_t, 2> d_in{32, 32};
    double embed_noise_sigma = 0.05;

    static FactorSpec uniform(std::size_t n_shared, std::size_t n_unique1, std::size_t n_unique2);

    std::size_t n_shared() const { return p_shared.size(); }
    std::size_t n_unique(std::size_t m) const { return p_unique[m].size(); }
    void validate() const;
};

enum class TaskMode { kSharedOnly, kUniqueOnly, kMixed };
const char* task_mode_name(TaskMode m);
TaskMode parse_task_mode(const std::string& s);

struct TaskSpec {
    TaskMode mode = TaskMode::kMixed;
    std::size_t n_classes = 4;
};

struct Latents {
    std::size_t s = 0, u1 = 0, u2 = 0;
    bool operator==(const Latents&) const = default;
};

struct MultimodalSample {
    Tensor m1, m2;  // [seq_len × d_in] per modality
    std::optional<std::size_t> label;
    std::optional<Latents> latents;
};

using Dataset = std::vector<MultimodalSample>;

Latents sample_latents(const FactorSpec& spec, Rng& rng);

/// Fixed random vectors per (modality, factor, symbol), drawn once per seed.
struct Codebooks {
    // [m][symbol] → d_in floats
    std::array<std::vector<std::vector<float>>, 2> shared;
    std::array<std::vector<std::vector<float>>, 2> unique;

    static Codebooks make(const FactorSpec& spec, Rng& rng);
};

/// Token t of modality m = shared_m[x_S] + unique_m[x_U^m] + N(0, σ²) noise.
MultimodalSample render(const Latents& z, const FactorSpec& spec, const Codebooks& books, Rng& rng);

std::size_t label(const Latents& z, const TaskSpec& task);

/// n samples; codebooks come from stream 0 of `seed`, sample i from stream i of stream 1.
Dataset generate(const FactorSpec& spec, const TaskSpec& task, std::size_t n, std::uint64_t seed);

/// JSON lines: {"m1": [[...]], "m2": [[...]], "y": int|null, "latents": [s,u1,u2]|null}.
/// A ".gz" suffix selects gzip compression.
void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);
std::string dataset_to_jsonl(const Dataset& data);
Dataset dataset_from_jsonl(const std::string& text);

}  // namespace s3
