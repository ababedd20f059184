// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format:
//
//   bytes 0-7   magic "CSADV001"
//   bytes 8-15  header length n, unsigned 64-bit little-endian
//   n bytes     UTF-8 JSON header
//   payload     float32 little-endian values, parameter by parameter in
//               manifest order
//
// The header carries the model config, its hash, the vocabulary, the
// parameter manifest ([{name, shape}]) and free-form metadata. Nothing
// time-dependent is written, so equal models give equal files.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "claimspot/encoder.hpp"
#include "claimspot/textpipe.hpp"
#include "json.hpp"

namespace claimspot {

inline constexpr std::string_view kCheckpointMagic = "CSADV001";

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  Params params;
  nlohmann::json metadata = nlohmann::json::object();
};

/// FNV-1a 64 of the canonical config JSON, as 16 hex digits.
std::string config_hash(const ModelConfig& config);

std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws VersionError, TruncatedError, ShapeError or LoadError.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 of the float32 payload, as 16 hex digits. Identifies the
/// parameter values independently of metadata.
std::string checkpoint_id(const Params& params);

}  // namespace claimspot
