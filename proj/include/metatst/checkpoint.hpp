#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metatst/config.hpp"
#include "metatst/layers.hpp"
#include "metatst/model.hpp"

namespace metatst {

struct NamedTensor {
    std::string name;
    Mat<float> value;
};

/// Named-tensor archive: a JSON manifest followed by float32 tensors.
///
///   "MTSTARC1" | u64 manifest bytes | manifest JSON | u32 count |
///   count x (u32 name bytes | name | u32 rows | u32 cols | rows*cols f32)
///
/// Integers and floats are little-endian, tensors row-major. The manifest
/// carries "content_digest", the SHA-256 of everything after the manifest;
/// load() rejects an archive whose digest does not match.
struct TensorArchive {
    nlohmann::json manifest = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path);
    const NamedTensor* find(const std::string& name) const;
};

struct CheckpointInfo {
    ModelConfig config;
    std::string template_version;
    std::string backend_model_id;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const Model& model, const CheckpointInfo& info, const std::filesystem::path& path);

struct LoadedCheckpoint {
    Model model;
    CheckpointInfo info;
};

/// Loads and verifies a checkpoint: digest, template version, backend model
/// id (when `expected_backend` is given) and every tensor shape.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_backend = std::nullopt);

/// Copies parameter values between models with identical configs.
void copy_parameters(const Model& from, Model& to);

}  // namespace metatst
