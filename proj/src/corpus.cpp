#include "amir/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

#include "amir/errors.hpp"
#include "amir/image_io.hpp"
#include "amir/seed.hpp"

namespace amir {

using nlohmann::json;

const char* to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw_config("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

Split assign_split(std::string_view source_id, std::uint64_t seed, const SplitFractions& fractions) {
  const double u = unit_interval(combine_seed(seed, hash_string(source_id)));
  if (u < fractions.train) return Split::Train;
  if (u < fractions.train + fractions.val) return Split::Val;
  return Split::Test;
}

PhantomKind parse_phantom(std::string_view name) {
  if (name == "mri") return PhantomKind::Mri;
  if (name == "ct") return PhantomKind::Ct;
  if (name == "pet") return PhantomKind::Pet;
  throw_config("unknown synthetic kind '" + std::string(name) + "' (expected mri, ct or pet)");
}

const char* to_string(PhantomKind kind) noexcept {
  switch (kind) {
    case PhantomKind::Mri: return "mri";
    case PhantomKind::Ct: return "ct";
    case PhantomKind::Pet: return "pet";
  }
  return "?";
}

namespace {

struct Ellipse {
  double cx, cy, a, b, angle;

  // <= 1 inside
  double radius2(double x, double y) const {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = ((x - cx) * c + (y - cy) * s) / a;
    const double v = (-(x - cx) * s + (y - cy) * c) / b;
    return u * u + v * v;
  }
  bool contains(double x, double y) const { return radius2(x, y) <= 1.0; }
};

class Canvas {
 public:
  explicit Canvas(std::int64_t size) : size_(size), pixels_(static_cast<std::size_t>(size * size), 0.0) {}

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (std::int64_t r = 0; r < size_; ++r) {
      const double y = (2.0 * static_cast<double>(r) + 1.0) / static_cast<double>(size_) - 1.0;
      for (std::int64_t c = 0; c < size_; ++c) {
        const double x = (2.0 * static_cast<double>(c) + 1.0) / static_cast<double>(size_) - 1.0;
        fn(x, y, pixels_[static_cast<std::size_t>(r * size_ + c)]);
      }
    }
  }

  void fill(const Ellipse& e, double value) {
    for_each([&](double x, double y, double& p) {
      if (e.contains(x, y)) p = value;
    });
  }

  torch::Tensor tensor() const {
    auto t = torch::empty({size_, size_}, torch::kFloat64);
    std::copy(pixels_.begin(), pixels_.end(), t.data_ptr<double>());
    return t.clamp(0.0, 1.0).to(torch::kFloat32);
  }

 private:
  std::int64_t size_;
  std::vector<double> pixels_;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

torch::Tensor mri_phantom(std::int64_t size, std::mt19937_64& rng) {
  Canvas canvas(size);
  const double cx = uniform(rng, -0.04, 0.04);
  const double cy = uniform(rng, -0.04, 0.04);
  const double a = uniform(rng, 0.70, 0.84);
  const double b = uniform(rng, 0.80, 0.92);
  const double tilt = uniform(rng, -0.15, 0.15);
  const Ellipse skull{cx, cy, a, b, tilt};
  const Ellipse brain{cx, cy, a - 0.09, b - 0.09, tilt};
  canvas.fill(skull, uniform(rng, 0.85, 0.95));

  const double base = uniform(rng, 0.42, 0.58);
  const double freq = uniform(rng, 5.0, 9.0) * std::numbers::pi;
  const double dir = uniform(rng, 0.0, std::numbers::pi);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double depth = uniform(rng, 0.06, 0.10);
  canvas.for_each([&](double x, double y, double& p) {
    if (brain.contains(x, y)) {
      p = base + depth * std::sin(freq * (x * std::cos(dir) + y * std::sin(dir)) + phase);
    }
  });
  const int structures = uniform_int(rng, 3, 6);
  for (int i = 0; i < structures; ++i) {
    const Ellipse e{cx + uniform(rng, -0.4, 0.4), cy + uniform(rng, -0.45, 0.45), uniform(rng, 0.06, 0.25),
                    uniform(rng, 0.06, 0.25), uniform(rng, 0.0, std::numbers::pi)};
    canvas.fill(e, uniform(rng, 0.15, 0.95));
  }
  // paired ventricles
  const double vy = cy + uniform(rng, -0.1, 0.1);
  const double va = uniform(rng, 0.05, 0.09);
  const double vb = uniform(rng, 0.15, 0.25);
  canvas.fill({cx - 0.12, vy, va, vb, 0.25}, 0.08);
  canvas.fill({cx + 0.12, vy, va, vb, -0.25}, 0.08);
  return canvas.tensor();
}

torch::Tensor ct_phantom(std::int64_t size, std::mt19937_64& rng) {
  Canvas canvas(size);
  const double a = uniform(rng, 0.80, 0.92);
  const double b = uniform(rng, 0.55, 0.70);
  const double cy = uniform(rng, -0.05, 0.05);
  canvas.fill({0.0, cy, a, b, 0.0}, uniform(rng, 0.33, 0.38));          // fat rim
  canvas.fill({0.0, cy, a - 0.06, b - 0.06, 0.0}, uniform(rng, 0.44, 0.50));  // soft tissue
  const double lung_a = uniform(rng, 0.20, 0.28);
  const double lung_b = uniform(rng, 0.28, 0.38);
  const double lung_level = uniform(rng, 0.04, 0.10);
  canvas.fill({-0.38, cy - 0.05, lung_a, lung_b, uniform(rng, -0.2, 0.2)}, lung_level);
  canvas.fill({0.38, cy - 0.05, lung_a, lung_b, uniform(rng, -0.2, 0.2)}, lung_level);
  canvas.fill({uniform(rng, 0.0, 0.12), cy + 0.02, uniform(rng, 0.14, 0.2), uniform(rng, 0.14, 0.2), 0.0},
              uniform(rng, 0.52, 0.58));  // heart
  canvas.fill({0.0, cy + b * 0.68, 0.09, 0.09, 0.0}, uniform(rng, 0.88, 0.96));  // spine
  const int vessels = uniform_int(rng, 3, 7);
  for (int i = 0; i < vessels; ++i) {
    const double r = uniform(rng, 0.02, 0.05);
    canvas.fill({uniform(rng, -0.6, 0.6), cy + uniform(rng, -0.4, 0.4), r, r, 0.0}, uniform(rng, 0.62, 0.95));
  }
  return canvas.tensor();
}

torch::Tensor pet_phantom(std::int64_t size, std::mt19937_64& rng) {
  Canvas canvas(size);
  const Ellipse body{0.0, uniform(rng, -0.05, 0.05), uniform(rng, 0.55, 0.75), uniform(rng, 0.7, 0.9), 0.0};
  const double uptake = uniform(rng, 0.06, 0.12);
  const Ellipse liver{uniform(rng, -0.4, -0.2), uniform(rng, 0.0, 0.3), uniform(rng, 0.2, 0.3),
                      uniform(rng, 0.15, 0.22), uniform(rng, 0.0, 1.0)};
  const double liver_uptake = uniform(rng, 0.18, 0.28);

  struct Blob { double x, y, sigma, amplitude; };
  std::vector<Blob> blobs;
  blobs.push_back({uniform(rng, -0.1, 0.1), uniform(rng, -0.7, -0.5), uniform(rng, 0.08, 0.12),
                   uniform(rng, 0.55, 0.85)});  // brain / bladder-like hot organ
  const int hot = uniform_int(rng, 2, 5);
  for (int i = 0; i < hot; ++i) {
    blobs.push_back({uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.6), uniform(rng, 0.03, 0.08),
                     uniform(rng, 0.3, 0.8)});
  }
  canvas.for_each([&](double x, double y, double& p) {
    // soft body edge
    p = uptake / (1.0 + std::exp((std::sqrt(body.radius2(x, y)) - 1.0) * 25.0));
    const double lr = liver.radius2(x, y);
    p += liver_uptake * std::exp(-lr * lr);
    for (const auto& blob : blobs) {
      const double d2 = (x - blob.x) * (x - blob.x) + (y - blob.y) * (y - blob.y);
      p += blob.amplitude * std::exp(-d2 / (2.0 * blob.sigma * blob.sigma));
    }
  });
  return canvas.tensor();
}

}  // namespace

torch::Tensor make_phantom(PhantomKind kind, std::int64_t size, std::uint64_t seed) {
  if (size < 8) throw_parameter("phantom size must be >= 8");
  std::mt19937_64 rng(seed);
  switch (kind) {
    case PhantomKind::Mri: return mri_phantom(size, rng);
    case PhantomKind::Ct: return ct_phantom(size, rng);
    case PhantomKind::Pet: return pet_phantom(size, rng);
  }
  throw_parameter("unknown phantom kind");
}

json CorpusManifest::to_json() const {
  json tasks_json = json::object();
  for (const auto& [name, source] : tasks) {
    if (source.synthetic()) {
      tasks_json[name] = {{"synthetic",
                           {{"kind", to_string(source.phantom)},
                            {"count", source.synthetic_count},
                            {"size", source.synthetic_size}}}};
    } else {
      json dirs = json::array();
      for (const auto& d : source.directories) dirs.push_back(d.string());
      tasks_json[name] = {{"sources", dirs}};
    }
  }
  return {
      {"split_seed", split_seed},
      {"split_fractions", {{"train", fractions.train}, {"val", fractions.val}}},
      {"degradation",
       {{"kspace_factor", degradation.kspace_factor},
        {"noise_sigma", degradation.noise_sigma},
        {"poisson_scale", degradation.poisson_scale ? json(*degradation.poisson_scale) : json(nullptr)},
        {"dose_reduction", degradation.dose_reduction},
        {"count_scale", degradation.count_scale}}},
      {"tasks", tasks_json},
  };
}

CorpusManifest CorpusManifest::from_json(const json& j, const std::filesystem::path& data_root) {
  CorpusManifest m;
  try {
    m.split_seed = j.value("split_seed", m.split_seed);
    if (j.contains("split_fractions")) {
      const auto& f = j.at("split_fractions");
      m.fractions.train = f.value("train", m.fractions.train);
      m.fractions.val = f.value("val", m.fractions.val);
    }
    if (j.contains("degradation")) {
      const auto& d = j.at("degradation");
      m.degradation.kspace_factor = d.value("kspace_factor", m.degradation.kspace_factor);
      m.degradation.noise_sigma = d.value("noise_sigma", m.degradation.noise_sigma);
      if (d.contains("poisson_scale")) {
        m.degradation.poisson_scale =
            d.at("poisson_scale").is_null() ? std::nullopt : std::optional<double>(d.at("poisson_scale").get<double>());
      }
      m.degradation.dose_reduction = d.value("dose_reduction", m.degradation.dose_reduction);
      m.degradation.count_scale = d.value("count_scale", m.degradation.count_scale);
    }
    for (const auto& [name, spec] : j.at("tasks").items()) {
      TaskSource source;
      if (spec.contains("synthetic")) {
        const auto& s = spec.at("synthetic");
        source.phantom = parse_phantom(s.at("kind").get<std::string>());
        source.synthetic_count = s.at("count").get<int>();
        source.synthetic_size = s.value("size", 64);
      } else {
        for (const auto& d : spec.at("sources")) {
          std::filesystem::path p = d.get<std::string>();
          source.directories.push_back(p.is_absolute() ? p : data_root / p);
        }
        if (source.directories.empty()) throw_config("task '" + name + "' lists no source directories");
      }
      m.tasks[name] = source;
    }
  } catch (const json::exception& e) {
    throw_config(std::string("malformed corpus manifest: ") + e.what());
  }
  if (m.tasks.empty()) throw_config("corpus manifest lists no tasks");
  if (!(m.fractions.train > 0.0) || m.fractions.val < 0.0 || m.fractions.train + m.fractions.val >= 1.0) {
    throw_config("split fractions must satisfy train > 0, val >= 0, train + val < 1");
  }
  m.degradation.validate();
  return m;
}

CorpusManifest CorpusManifest::load(const std::filesystem::path& path, const std::filesystem::path& data_root) {
  std::ifstream in(path);
  if (!in) throw_data("cannot open corpus manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw_config("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j, data_root);
}

CorpusManifest CorpusManifest::synthetic(int count_per_task, int size, std::uint64_t split_seed) {
  CorpusManifest m;
  m.split_seed = split_seed;
  const std::array<std::pair<const char*, PhantomKind>, 3> defaults = {
      {{"sr", PhantomKind::Mri}, {"denoise", PhantomKind::Ct}, {"synth", PhantomKind::Pet}}};
  for (const auto& [task, kind] : defaults) {
    TaskSource s;
    s.phantom = kind;
    s.synthetic_count = count_per_task;
    s.synthetic_size = size;
    m.tasks[task] = s;
  }
  return m;
}

Corpus::Corpus(const CorpusManifest& manifest)
    : manifest_(manifest), registry_(TaskRegistry::with_defaults(manifest.degradation)) {
  for (const auto& [name, source] : manifest_.tasks) {
    const TaskId task = registry_.id(name);
    std::vector<SourceImage> images;
    if (source.synthetic()) {
      if (source.synthetic_count <= 0) throw_config("synthetic count for '" + name + "' must be positive");
      for (int i = 0; i < source.synthetic_count; ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s-%s-%04d", to_string(source.phantom), name.c_str(), i);
        const std::string id = buf;
        images.push_back({id, task, make_phantom(source.phantom, source.synthetic_size,
                                                 sample_seed(manifest_.split_seed, id, 0))});
      }
    } else {
      for (const auto& dir : source.directories) {
        if (!std::filesystem::is_directory(dir)) throw_data("source directory " + dir.string() + " does not exist");
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
          if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          try {
            images.push_back({name + "/" + f.stem().string(), task, read_png(f)});
          } catch (const Error& e) {
            std::cerr << "warning: skipping " << f << ": " << e.what() << "\n";
            ++skipped_;
          }
        }
      }
    }
    if (images.empty()) throw_data("task '" + name + "' has no usable source images");
    for (auto& img : images) {
      const Split split = assign_split(img.id, manifest_.split_seed, manifest_.fractions);
      splits_[{task.value, split}].push_back(std::move(img));
    }
  }
}

std::span<const SourceImage> Corpus::sources(TaskId task, Split split) const {
  auto it = splits_.find({task.value, split});
  if (it == splits_.end()) return {};
  return it->second;
}

TaskSample Corpus::sample(TaskId task, Split split, std::size_t index, std::uint64_t global_seed,
                          std::uint64_t epoch) const {
  auto pool = sources(task, split);
  if (pool.empty()) {
    throw_data("no " + std::string(to_string(split)) + " sources for task '" + registry_.name(task) + "'");
  }
  const auto& src = pool[index % pool.size()];
  auto lq = registry_.degrade(task, src.hq, sample_seed(global_seed, src.id, epoch));
  return {task, lq, src.hq, src.id};
}

TaskBatch stack_samples(std::span<const TaskSample> samples) {
  if (samples.empty()) throw_data("cannot stack an empty batch");
  TaskBatch batch;
  batch.task = samples.front().task;
  std::vector<torch::Tensor> lq, hq;
  for (const auto& s : samples) {
    if (s.task != batch.task) throw_data("batch mixes tasks");
    if (s.hq.sizes() != samples.front().hq.sizes()) throw_shape("batch samples differ in size");
    lq.push_back(s.lq);
    hq.push_back(s.hq);
    batch.source_ids.push_back(s.source_id);
  }
  batch.lq = torch::stack(lq).unsqueeze(1);
  batch.hq = torch::stack(hq).unsqueeze(1);
  return batch;
}

std::filesystem::path default_data_root() {
  if (const char* env = std::getenv("AMIR_DATA_DIR"); env && *env) return env;
  return std::filesystem::current_path();
}

}  // namespace amir
