#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace amir {

struct TrainConfig {
  std::vector<std::string> tasks = {"sr", "denoise", "synth"};
  std::int64_t patch_size = 128;
  std::int64_t batch_size = 8;
  std::int64_t iterations = 200000;
  double lr_max = 2e-4;
  double lr_min = 1e-6;
  double balance_weight = 0.01;  // gamma
  std::uint64_t seed = 0;
  bool desk_scale = false;
  std::int64_t validate_every = 0;    // 0: max(iterations / 100, 100)
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const;
  std::int64_t validation_interval() const;
};

}  // namespace amir
