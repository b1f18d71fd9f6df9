#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "aelab/autoencoders.hpp"

namespace aelab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  int epoch = 0;
  double train_loss = 0.0;
  std::uint64_t seed = 0;
};

struct LoadedCheckpoint {
  std::unique_ptr<Autoencoder<float>> model;
  CheckpointMeta meta;
};

/// Layout: "AEC1", u32 LE header length, UTF-8 JSON header
/// {version, spec, manifest: [{name, shape, offset}], metadata}, then the
/// little-endian float32 parameter arrays at the manifest byte offsets
/// (relative to the end of the header).
void save_checkpoint(const Autoencoder<float>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

/// Validates magic, version, manifest names, shapes and data length. Errors
/// are IoError messages naming the offending field or parameter.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// JSON text of a ModelSpec as stored in the checkpoint header.
std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

}  // namespace aelab
