#include "amir/degradation.hpp"

#include <algorithm>
#include <cmath>

#include "amir/errors.hpp"

namespace amir {

namespace {

void require_image(const torch::Tensor& t, const char* op) {
  if (t.dim() != 2 || t.numel() == 0) throw_shape(std::string(op) + " expects a non-empty [H, W] image");
}

torch::Tensor contiguous_double(const torch::Tensor& t) {
  return t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
}

}  // namespace

torch::Tensor kspace_retention_mask(std::int64_t height, std::int64_t width, int factor) {
  const auto kh = height / factor;
  const auto kw = width / factor;
  auto mask = torch::zeros({height, width}, torch::kBool);
  mask.narrow(0, height / 2 - kh / 2, kh).narrow(1, width / 2 - kw / 2, kw).fill_(true);
  return mask;
}

torch::Tensor degrade_kspace(const torch::Tensor& hq, int factor) {
  require_image(hq, "degrade_kspace");
  const auto h = hq.size(0);
  const auto w = hq.size(1);
  if (h % 2 != 0 || w % 2 != 0) throw_shape("degrade_kspace needs even dimensions");
  if (factor < 2) throw_parameter("k-space factor must be >= 2, got " + std::to_string(factor));
  if (factor > std::min(h, w) / 2) {
    throw_parameter("k-space factor " + std::to_string(factor) + " exceeds min(H, W)/2 = " +
                    std::to_string(std::min(h, w) / 2));
  }
  auto spectrum = torch::fft::fftshift(torch::fft::fft2(contiguous_double(hq)));
  spectrum = spectrum * kspace_retention_mask(h, w, factor).to(torch::kFloat64);
  auto image = torch::fft::ifft2(torch::fft::ifftshift(spectrum)).abs();
  return image.clamp(0.0, 1.0).to(torch::kFloat32).contiguous();
}

torch::Tensor degrade_noise(const torch::Tensor& hq, double sigma, std::optional<double> poisson_scale,
                            std::uint64_t seed) {
  require_image(hq, "degrade_noise");
  if (sigma < 0.0) throw_parameter("noise sigma must be >= 0");
  if (poisson_scale && !(*poisson_scale > 0.0)) throw_parameter("poisson_scale must be > 0");
  auto src = contiguous_double(hq);
  auto out = torch::empty_like(src);
  const double* in = src.data_ptr<double>();
  double* dst = out.data_ptr<double>();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::int64_t i = 0; i < src.numel(); ++i) {
    double v = in[i];
    if (poisson_scale) {
      const double mean = std::max(v, 0.0) * *poisson_scale;
      v = mean > 0.0 ? static_cast<double>(std::poisson_distribution<std::int64_t>(mean)(rng)) / *poisson_scale
                     : 0.0;
    }
    if (sigma > 0.0) v += sigma * gauss(rng);
    dst[i] = std::clamp(v, 0.0, 1.0);
  }
  return out.to(torch::kFloat32);
}

torch::Tensor degrade_count_thinning(const torch::Tensor& hq, int drf, std::uint64_t seed, double count_scale) {
  require_image(hq, "degrade_count_thinning");
  if (drf < 2) throw_parameter("dose reduction factor must be >= 2, got " + std::to_string(drf));
  if (!(count_scale > 0.0)) throw_parameter("count scale must be > 0");
  auto src = contiguous_double(hq);
  auto out = torch::empty_like(src);
  const double* in = src.data_ptr<double>();
  double* dst = out.data_ptr<double>();

  std::mt19937_64 rng(seed);
  const double keep = 1.0 / drf;
  for (std::int64_t i = 0; i < src.numel(); ++i) {
    const double expected = std::max(in[i], 0.0) * count_scale;
    std::int64_t counts = expected > 0.0 ? std::poisson_distribution<std::int64_t>(expected)(rng) : 0;
    std::int64_t kept = counts > 0 ? std::binomial_distribution<std::int64_t>(counts, keep)(rng) : 0;
    dst[i] = std::clamp(static_cast<double>(kept) * drf / count_scale, 0.0, 1.0);
  }
  return out.to(torch::kFloat32);
}

TaskSample sample_patch(const TaskSample& sample, std::int64_t size, std::mt19937_64& rng) {
  const auto h = sample.hq.size(0);
  const auto w = sample.hq.size(1);
  if (sample.lq.sizes() != sample.hq.sizes()) throw_shape("lq and hq shapes differ");
  if (size <= 0 || size > std::min(h, w)) {
    throw_shape("patch size " + std::to_string(size) + " does not fit a " + std::to_string(h) + "x" +
                std::to_string(w) + " image");
  }
  const auto top = std::uniform_int_distribution<std::int64_t>(0, h - size)(rng);
  const auto left = std::uniform_int_distribution<std::int64_t>(0, w - size)(rng);
  auto crop = [&](const torch::Tensor& t) { return t.narrow(0, top, size).narrow(1, left, size).contiguous(); };
  return {sample.task, crop(sample.lq), crop(sample.hq), sample.source_id};
}

void DegradationParams::validate() const {
  if (kspace_factor < 2) throw_config("kspace_factor=" + std::to_string(kspace_factor) + " must be >= 2");
  if (noise_sigma < 0.0) throw_config("noise_sigma=" + std::to_string(noise_sigma) + " must be >= 0");
  if (poisson_scale && !(*poisson_scale > 0.0)) throw_config("poisson_scale must be > 0");
  if (dose_reduction < 2) throw_config("dose_reduction=" + std::to_string(dose_reduction) + " must be >= 2");
  if (!(count_scale > 0.0)) throw_config("count_scale must be > 0");
}

TaskRegistry TaskRegistry::with_defaults(const DegradationParams& params) {
  params.validate();
  TaskRegistry registry;
  registry.add("sr", [factor = params.kspace_factor](const torch::Tensor& hq, std::uint64_t) {
    return degrade_kspace(hq, factor);
  });
  registry.add("denoise", [sigma = params.noise_sigma, scale = params.poisson_scale](const torch::Tensor& hq,
                                                                                     std::uint64_t seed) {
    return degrade_noise(hq, sigma, scale, seed);
  });
  registry.add("synth", [drf = params.dose_reduction, q = params.count_scale](const torch::Tensor& hq,
                                                                              std::uint64_t seed) {
    return degrade_count_thinning(hq, drf, seed, q);
  });
  return registry;
}

TaskId TaskRegistry::add(std::string name, Degrader degrader) {
  if (std::find(names_.begin(), names_.end(), name) != names_.end()) throw_config("task '" + name + "' already registered");
  names_.push_back(std::move(name));
  degraders_.push_back(std::move(degrader));
  return TaskId{static_cast<int>(names_.size()) - 1};
}

TaskId TaskRegistry::id(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw_config("unknown task '" + std::string(name) + "'");
  return TaskId{static_cast<int>(it - names_.begin())};
}

const std::string& TaskRegistry::name(TaskId task) const {
  if (task.value < 0 || static_cast<std::size_t>(task.value) >= names_.size()) {
    throw_config("task id " + std::to_string(task.value) + " is not registered");
  }
  return names_[static_cast<std::size_t>(task.value)];
}

torch::Tensor TaskRegistry::degrade(TaskId task, const torch::Tensor& hq, std::uint64_t seed) const {
  name(task);
  return degraders_[static_cast<std::size_t>(task.value)](hq, seed);
}

std::vector<TaskId> TaskRegistry::ids() const {
  std::vector<TaskId> out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.push_back(TaskId{static_cast<int>(i)});
  return out;
}

}  // namespace amir
