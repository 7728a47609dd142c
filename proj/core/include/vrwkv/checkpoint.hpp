#pragma once

// Binary checkpoint layout (all integers unsigned 32-bit little-endian):
//
//   "VRWK" | version | config_len | config JSON (UTF-8, config_len bytes)
//   then, per learnable tensor in declaration order:
//   name_len | name | rank | dim[0] .. dim[rank-1] | float32 LE payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "vrwkv/model.hpp"

namespace vrwkv {

inline constexpr std::string_view kCheckpointMagic = "VRWK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(std::string_view json);

std::string to_string(WkvDirection direction);
WkvDirection parse_direction(std::string_view name);

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

template <typename Real>
std::string encode_checkpoint(const ModelConfig& config, const ModelParams<Real>& params);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes to a temporary sibling file and renames it into place.
template <typename Real>
void write_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                      const ModelParams<Real>& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Atomic whole-file write (temporary file + rename).
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace vrwkv
