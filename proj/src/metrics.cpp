#include "amir/metrics.hpp"

#include <cmath>
#include <limits>

#include "amir/errors.hpp"

namespace amir {

namespace {

void require_pair(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.numel() == 0 || target.numel() == 0) throw_shape("metrics need non-empty images");
  if (pred.sizes() != target.sizes()) throw_shape("metric inputs differ in shape");
}

torch::Tensor as_double(const torch::Tensor& t) { return t.detach().to(torch::kCPU, torch::kFloat64); }

}  // namespace

double mse(const torch::Tensor& pred, const torch::Tensor& target) {
  require_pair(pred, target);
  return (as_double(pred) - as_double(target)).pow(2).mean().item<double>();
}

double psnr(const torch::Tensor& pred, const torch::Tensor& target, double data_range) {
  const double e = mse(pred, target);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / e);
}

double rmse(const torch::Tensor& pred, const torch::Tensor& target) { return std::sqrt(mse(pred, target)); }

torch::Tensor ssim_window() {
  auto coords = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

double ssim(const torch::Tensor& pred, const torch::Tensor& target, double data_range) {
  require_pair(pred, target);
  if (pred.dim() != 2) throw_shape("ssim expects [H, W] images");
  if (pred.size(0) < kSsimWindow || pred.size(1) < kSsimWindow) {
    throw_shape("ssim needs images of at least 11x11");
  }
  auto x = as_double(pred).unsqueeze(0).unsqueeze(0);
  auto y = as_double(target).unsqueeze(0).unsqueeze(0);
  auto w = ssim_window().unsqueeze(0).unsqueeze(0);
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, w); };

  auto mu_x = filt(x);
  auto mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  const double c1 = std::pow(kSsimK1 * data_range, 2);
  const double c2 = std::pow(kSsimK2 * data_range, 2);
  auto map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

ImageMetrics evaluate_pair(const torch::Tensor& pred, const torch::Tensor& target, double data_range) {
  return {psnr(pred, target, data_range), ssim(pred, target, data_range), rmse(pred, target)};
}

void MetricsReport::add(const std::string& task, const ImageMetrics& m) {
  auto& s = sums_[task];
  s.total.psnr += m.psnr;
  s.total.ssim += m.ssim;
  s.total.rmse += m.rmse;
  ++s.n;
}

ImageMetrics MetricsReport::task_mean(const std::string& task) const {
  auto it = sums_.find(task);
  if (it == sums_.end() || it->second.n == 0) return {};
  const double n = static_cast<double>(it->second.n);
  return {it->second.total.psnr / n, it->second.total.ssim / n, it->second.total.rmse / n};
}

ImageMetrics MetricsReport::macro_average() const {
  ImageMetrics out;
  if (sums_.empty()) return out;
  for (const auto& [task, s] : sums_) {
    const auto m = task_mean(task);
    out.psnr += m.psnr;
    out.ssim += m.ssim;
    out.rmse += m.rmse;
  }
  const double n = static_cast<double>(sums_.size());
  return {out.psnr / n, out.ssim / n, out.rmse / n};
}

std::size_t MetricsReport::count(const std::string& task) const {
  auto it = sums_.find(task);
  return it == sums_.end() ? 0 : it->second.n;
}

std::vector<std::string> MetricsReport::tasks() const {
  std::vector<std::string> out;
  for (const auto& [task, s] : sums_) out.push_back(task);
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  auto entry = [](const ImageMetrics& m) {
    return nlohmann::json{{"psnr", m.psnr}, {"ssim", m.ssim}, {"rmse", m.rmse}};
  };
  nlohmann::json j;
  for (const auto& [task, s] : sums_) {
    j["tasks"][task] = entry(task_mean(task));
    j["tasks"][task]["images"] = s.n;
  }
  j["average"] = entry(macro_average());
  return j;
}

}  // namespace amir
