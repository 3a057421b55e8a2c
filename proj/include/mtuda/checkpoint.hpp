#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "mtuda/trainer.hpp"

namespace mtuda {

struct CheckpointMeta {
  TrainConfig config;
  std::uint64_t seed = 0;
  RunSplits splits;
  nlohmann::json extra = nlohmann::json::object();  ///< free-form run information
};

struct LoadedCheckpoint {
  TrainState state;
  CheckpointMeta meta;
};

/// Layout: 8-byte magic "MTUDACK1", little-endian uint64 header length, JSON
/// header, then the raw little-endian arrays listed in the header's table.
/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const CheckpointMeta& meta);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Write `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace mtuda
