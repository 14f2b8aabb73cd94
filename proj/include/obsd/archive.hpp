#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "obsd/nn/modules.hpp"

namespace obsd {

// Training bookkeeping persisted in archive manifests.
struct TrainStats {
    std::vector<double> loss_history;
    int64_t steps = 0;
    int64_t epochs_done = 0;
};

// On-disk parameter archive: a directory holding manifest.json plus one raw
// little-endian float64 blob per named parameter (and optimizer moments when
// training state is saved). Round-trips are bit-exact.
struct ArchiveManifest {
    int schema_version = 1;
    std::string kind;  // denoiser | refiner | classifier
    nlohmann::json config;
    std::string config_digest;
    uint64_t seed = 0;
    int64_t epoch = 0;
    int64_t step = 0;
    std::vector<double> loss_history;
    nlohmann::json extra;  // kind-specific metadata (categories, accuracy, ...)
};

void save_archive(const std::filesystem::path& dir, const ArchiveManifest& manifest,
                  const nn::ParamStore& params, nn::Adam* opt = nullptr);

// Fills an already-constructed model's parameters; names and shapes must match
// the archive exactly.
ArchiveManifest load_archive(const std::filesystem::path& dir, nn::ParamStore& params,
                             nn::Adam* opt = nullptr);

ArchiveManifest read_manifest(const std::filesystem::path& dir);

// Digest over all parameter blobs in manifest order.
std::string archive_param_digest(const nn::ParamStore& params);

}  // namespace obsd
