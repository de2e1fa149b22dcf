#pragma once

// Degradation operators for the three restoration tasks and the task registry
// that binds each task name to its operator. All images are [H, W] float32 in
// [0, 1]; random operators are pure functions of their seed.

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace amir {

struct TaskId {
  int value = 0;
  friend constexpr auto operator<=>(TaskId, TaskId) = default;
};

inline constexpr TaskId kSuperResolution{0};
inline constexpr TaskId kDenoising{1};
inline constexpr TaskId kSynthesis{2};

struct TaskSample {
  TaskId task;
  torch::Tensor lq;  // [H, W]
  torch::Tensor hq;  // [H, W]
  std::string source_id;
};

/// k-space truncation: centred 2D DFT, keep the central
/// floor(H/factor) x floor(W/factor) block, zero-fill, inverse DFT, magnitude,
/// clamp to [0, 1]. Output has the input's shape.
torch::Tensor degrade_kspace(const torch::Tensor& hq, int factor = 4);

/// Boolean [H, W] mask, in centred (fftshifted) coordinates, of the retained
/// k-space coefficients.
torch::Tensor kspace_retention_mask(std::int64_t height, std::int64_t width, int factor);

/// Mixed Poisson-Gaussian noise:
///   clamp(Poisson(hq * scale) / scale + N(0, sigma^2), 0, 1).
/// `poisson_scale == std::nullopt` disables the Poisson term.
torch::Tensor degrade_noise(const torch::Tensor& hq, double sigma, std::optional<double> poisson_scale,
                            std::uint64_t seed);

/// Count thinning: hq * count_scale is the expected count, a Poisson draw is
/// binomially thinned with keep probability 1/drf, and the survivors are
/// rescaled by drf / count_scale (unbiased) then clamped to [0, 1].
torch::Tensor degrade_count_thinning(const torch::Tensor& hq, int drf, std::uint64_t seed,
                                     double count_scale = 1e4);

/// Shared random crop of lq and hq; the offset is uniform over all valid
/// positions. Throws a shape error if `size` exceeds either dimension.
TaskSample sample_patch(const TaskSample& sample, std::int64_t size, std::mt19937_64& rng);

struct DegradationParams {
  int kspace_factor = 4;
  double noise_sigma = 0.04;
  std::optional<double> poisson_scale = 400.0;
  int dose_reduction = 12;
  double count_scale = 1e4;

  void validate() const;
};

using Degrader = std::function<torch::Tensor(const torch::Tensor& hq, std::uint64_t seed)>;

/// Name <-> id table of restoration tasks and their degradation operators.
class TaskRegistry {
 public:
  /// Registers "sr", "denoise" and "synth" (ids 0, 1, 2).
  static TaskRegistry with_defaults(const DegradationParams& params);

  TaskId add(std::string name, Degrader degrader);

  /// Throws a config error for unknown names.
  TaskId id(std::string_view name) const;
  const std::string& name(TaskId task) const;
  torch::Tensor degrade(TaskId task, const torch::Tensor& hq, std::uint64_t seed) const;

  std::size_t size() const { return names_.size(); }
  std::vector<TaskId> ids() const;

 private:
  std::vector<std::string> names_;
  std::vector<Degrader> degraders_;
};

}  // namespace amir
