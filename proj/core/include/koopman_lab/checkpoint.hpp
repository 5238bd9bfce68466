#pragma once

#include <filesystem>
#include <string>

#include "koopman_lab/nn.hpp"

namespace koopman_lab::nn {

/// Writes `<stem>.json` (names, shapes, offsets, groups, plus the caller's
/// config block given as serialized JSON) and `<stem>.f64` (every parameter
/// concatenated, row-major little-endian binary64).
void save_checkpoint(const std::filesystem::path& stem, const ParameterSet& params,
                     const std::string& config_json = "{}");

struct LoadedCheckpoint {
  ParameterSet params;
  std::string config_json;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem);

/// Copies values from `source` into `target` by name; shapes must agree.
void assign_parameters(ParameterSet& target, const ParameterSet& source);

}  // namespace koopman_lab::nn
