#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace amir {

/// Loads an 8- or 16-bit PNG as a [H, W] float32 tensor in [0, 1]. Colour
/// inputs are converted to luminance. Throws a data error on failure.
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a [H, W] tensor (clamped to [0, 1]) as a grayscale PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& image, int bit_depth = 8);

}  // namespace amir
