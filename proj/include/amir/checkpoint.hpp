#pragma once

// Checkpoint directory layout:
//
//   manifest.json          format tag, iteration, full run config, parameter
//                          inventory (name, shape, blob) and Adam state entries
//   params/<name>.bin      one raw blob per parameter tensor
//   adam/<name>.m.bin      first moment
//   adam/<name>.v.bin      second moment
//
// Blobs use the layout documented in tensor_io.hpp. float32 round-trips exactly,
// so a restored run continues bit-identically.

#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

#include "amir/backbone.hpp"
#include "amir/config.hpp"

namespace amir {

inline constexpr const char* kCheckpointFormat = "amir-checkpoint-v1";

struct CheckpointInfo {
  RunConfig config;
  std::int64_t iteration = 0;
};

/// Writes to `<dir>.partial` and renames, replacing any existing `dir`.
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, AmirModel& model,
                     torch::optim::Adam* optimizer, std::int64_t iteration);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Copies stored parameters (and Adam state when `optimizer` is given) into an
/// already constructed model. Missing or mis-shaped entries are data errors.
void load_checkpoint_state(const std::filesystem::path& dir, AmirModel& model, torch::optim::Adam* optimizer);

/// Builds the model described by the manifest and loads its weights.
AmirModel load_model(const std::filesystem::path& dir);

}  // namespace amir
