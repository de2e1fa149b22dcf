#pragma once

// HQ source collections, split assignment, and on-the-fly LQ generation for the
// multi-task corpus. Sources are either PNG directories or one of three
// synthetic phantom families standing in for the three imaging modalities.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "amir/degradation.hpp"

namespace amir {

enum class Split { Train, Val, Test };

const char* to_string(Split split) noexcept;
Split parse_split(std::string_view name);

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
};

/// Pure function of (source id, seed).
Split assign_split(std::string_view source_id, std::uint64_t seed, const SplitFractions& fractions = {});

enum class PhantomKind { Mri, Ct, Pet };

PhantomKind parse_phantom(std::string_view name);
const char* to_string(PhantomKind kind) noexcept;

/// Deterministic [size, size] phantom in [0, 1]:
///  - Mri: head outline, bright rim, inner ellipses and fine oscillating texture
///  - Ct: wide body ellipse at soft-tissue level with dark lungs and bright bone
///  - Pet: dark background, faint body uptake, smooth hot spots
torch::Tensor make_phantom(PhantomKind kind, std::int64_t size, std::uint64_t seed);

struct TaskSource {
  std::vector<std::filesystem::path> directories;  // PNG inputs; empty for synthetic
  PhantomKind phantom = PhantomKind::Mri;
  int synthetic_count = 0;
  int synthetic_size = 64;

  bool synthetic() const { return directories.empty(); }
};

/// Corpus manifest (JSON):
///   {
///     "split_seed": 1234,
///     "split_fractions": {"train": 0.7, "val": 0.15},
///     "degradation": {"kspace_factor": 4, "noise_sigma": 0.04, "poisson_scale": 400,
///                     "dose_reduction": 12, "count_scale": 10000},
///     "tasks": {
///       "sr": {"sources": ["ixi_like/"]},
///       "denoise": {"synthetic": {"kind": "ct", "count": 48, "size": 64}}
///     }
///   }
/// Relative directories resolve against `data_root`.
struct CorpusManifest {
  std::map<std::string, TaskSource> tasks;
  DegradationParams degradation;
  std::uint64_t split_seed = 1234;
  SplitFractions fractions;

  nlohmann::json to_json() const;
  static CorpusManifest from_json(const nlohmann::json& j, const std::filesystem::path& data_root);
  static CorpusManifest load(const std::filesystem::path& path, const std::filesystem::path& data_root);

  /// Three synthetic sub-corpora: sr <- mri, denoise <- ct, synth <- pet.
  static CorpusManifest synthetic(int count_per_task, int size, std::uint64_t split_seed);
};

struct SourceImage {
  std::string id;
  TaskId task;
  torch::Tensor hq;  // [H, W]
};

class Corpus {
 public:
  /// Loads or generates every source. Unreadable PNGs are skipped with a
  /// warning; a task with no usable source is a data error.
  explicit Corpus(const CorpusManifest& manifest);

  const TaskRegistry& registry() const { return registry_; }
  const CorpusManifest& manifest() const { return manifest_; }

  std::span<const SourceImage> sources(TaskId task, Split split) const;

  /// Degrades source `index` of (task, split). The noise seed is derived from
  /// (global_seed, source id, epoch).
  TaskSample sample(TaskId task, Split split, std::size_t index, std::uint64_t global_seed,
                    std::uint64_t epoch) const;

  std::size_t skipped() const { return skipped_; }

 private:
  CorpusManifest manifest_;
  TaskRegistry registry_;
  std::map<std::pair<int, Split>, std::vector<SourceImage>> splits_;
  std::size_t skipped_ = 0;
};

/// One task's images stacked for the network: lq and hq are [B, 1, H, W].
struct TaskBatch {
  TaskId task;
  torch::Tensor lq;
  torch::Tensor hq;
  std::vector<std::string> source_ids;
};

/// Stacks equally sized samples of one task into a batch.
TaskBatch stack_samples(std::span<const TaskSample> samples);

/// AMIR_DATA_DIR when set, else the current directory.
std::filesystem::path default_data_root();

}  // namespace amir
