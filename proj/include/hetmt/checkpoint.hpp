#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "hetmt/model.hpp"

namespace hetmt {

inline constexpr int kCheckpointFormatVersion = 1;

/// Model weights plus, for resumable training checkpoints, the ADAM moments.
struct Checkpoint {
  ModelConfig config;
  std::int64_t iteration = 0;
  std::uint64_t init_seed = 0;
  Params<float> params;
  std::optional<Params<float>> adam_m;
  std::optional<Params<float>> adam_v;
};

/// Writes `<base>.bin` (little-endian f32 tensors, params then moments) and
/// `<base>.json` (config, iteration, init_seed, format version, tensor table).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& base);

/// Loads and validates every tensor's shape against the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& base);

}  // namespace hetmt
