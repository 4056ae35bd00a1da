#pragma once

#include <filesystem>

#include "crt/config.hpp"
#include "crt/model.hpp"

namespace crt {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  ModelParams params;
  std::size_t step = 0;
};

/// Writes `<manifest>` (JSON: version, config, array table) and a sibling
/// values file of raw little-endian float64. Both files are replaced
/// atomically.
void save_checkpoint(const std::filesystem::path& manifest, const RunConfig& config, const ModelParams& params,
                     std::size_t step);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

/// Write-to-temp then rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace crt
