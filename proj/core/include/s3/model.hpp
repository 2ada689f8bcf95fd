#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "s3/encoder.hpp"

namespace s3 {

/// The two modality encoders trained together.
struct S3Model {
    EncoderConfig config;
    std::array<Encoder, 2> enc;

    S3Model() = default;
    /// Encoder m is seeded from stream m of `seed`.
    S3Model(const EncoderConfig& cfg, std::uint64_t seed);

    /// Names are "m1.<encoder param>" and "m2.<encoder param>".
    std::vector<NamedParam> parameters();
    std::vector<Tensor> router_parameters();
    ParamCount count(ParamGroup g) const;
    ParamCount total_count() const;
    S3Model deep_copy() const;
};

/// Checkpoint file: JSON object
///   {"format": "s3-checkpoint", "version": 1, "stage": str, "encoder": {...},
///    "tensors": [{"name": str, "shape": [..], "data": [..]}, ...]}
/// Floats are written in shortest round-trip form, so loading is bit-exact.
void save_checkpoint(S3Model& model, const std::string& stage, const std::string& path);
S3Model load_checkpoint(const std::string& path, std::string* stage = nullptr);
std::string checkpoint_to_json(S3Model& model, const std::string& stage);
S3Model checkpoint_from_json(const std::string& text, std::string* stage = nullptr);

/// FNV-1a over the bytes of every parameter whose group is in `groups`.
std::uint64_t parameter_hash(S3Model& model, const std::vector<ParamGroup>& groups);

}  // namespace s3
