#pragma once

#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

namespace amir {

// Raw tensor blob layout (all integers little-endian):
//
//   offset 0   char[4]   magic "AMRB"
//   offset 4   uint32    rank
//   offset 8   uint64    element count
//   offset 16  int64[rank] dims
//   ...        float32[element count], row-major
//
// Used for checkpoint parameter groups and cached degraded pairs.
inline constexpr char kBlobMagic[4] = {'A', 'M', 'R', 'B'};
inline constexpr std::size_t kBlobHeaderBytes = 16;

/// Writes `tensor` as float32. Non-float32 input is converted first.
void write_blob(const std::filesystem::path& path, const torch::Tensor& tensor);

/// Reads a blob back as a contiguous float32 CPU tensor. Throws a data error on a
/// malformed or truncated file.
torch::Tensor read_blob(const std::filesystem::path& path);

}  // namespace amir
