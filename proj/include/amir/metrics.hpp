#pragma once

// Full-reference restoration metrics on [H, W] images (or any equal-shaped
// tensors for PSNR/RMSE), computed in double precision.

#include <cstddef>
#include <map>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace amir {

double mse(const torch::Tensor& pred, const torch::Tensor& target);

/// 10 log10(range^2 / MSE); +infinity for identical inputs.
double psnr(const torch::Tensor& pred, const torch::Tensor& target, double data_range = 1.0);

double rmse(const torch::Tensor& pred, const torch::Tensor& target);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows with
/// C1 = (0.01 L)^2 and C2 = (0.03 L)^2. Inputs are [H, W] with H, W >= 11.
double ssim(const torch::Tensor& pred, const torch::Tensor& target, double data_range = 1.0);

/// Normalized 11x11 Gaussian window, [11, 11] double.
torch::Tensor ssim_window();

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
};

ImageMetrics evaluate_pair(const torch::Tensor& pred, const torch::Tensor& target, double data_range = 1.0);

/// Running per-task means plus a macro average across tasks.
class MetricsReport {
 public:
  void add(const std::string& task, const ImageMetrics& m);

  ImageMetrics task_mean(const std::string& task) const;
  ImageMetrics macro_average() const;
  std::size_t count(const std::string& task) const;
  std::vector<std::string> tasks() const;

  nlohmann::json to_json() const;

 private:
  struct Sum {
    ImageMetrics total;
    std::size_t n = 0;
  };
  std::map<std::string, Sum> sums_;
};

}  // namespace amir
