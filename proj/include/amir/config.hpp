#pragma once

// Run configuration: model + training + corpus, the two presets, and the
// TOML/JSON file format.
//
//   preset = "desk-scale"            # or "paper-default"
//   [model]  channels, blocks, refinement_blocks, heads, ffn_expansion,
//            dictionary_size, experts, top_k, enable_srm, enable_crm, use_dictionary
//   [train]  tasks, patch_size, batch_size, iterations, lr_max, lr_min,
//            balance_weight, seed, validate_every, checkpoint_every
//   [data]   manifest = "corpus.json"   # or the synthetic fallback below
//            synthetic_count, synthetic_size, split_seed
//
// Unknown keys are rejected. Precedence: preset < file < command-line flags.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "amir/backbone.hpp"
#include "amir/corpus.hpp"
#include "amir/train_config.hpp"

namespace amir {

struct DataConfig {
  std::optional<std::filesystem::path> manifest;  // corpus manifest JSON
  int synthetic_count = 64;
  int synthetic_size = 256;
  std::uint64_t split_seed = 1234;

  /// Loads the manifest (relative paths resolve against `data_root`) or builds
  /// the synthetic three-task corpus.
  CorpusManifest corpus_manifest(const std::filesystem::path& data_root) const;
};

struct RunConfig {
  std::string preset = "paper-default";
  AmirConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const;

  static RunConfig paper_default();
  static RunConfig desk_scale();
  /// Throws a config error for names other than paper-default and desk-scale.
  static RunConfig from_preset(std::string_view name);
};

nlohmann::json to_json(const AmirConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Layers the keys of `j` over `base`, rejecting unknown keys, then validates.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);

/// Reads a TOML (or .json) file into a JSON tree. Parse failures are config errors.
nlohmann::json read_config_tree(const std::filesystem::path& path);

/// Command-line overrides; unset fields leave the file value in place.
struct ConfigOverrides {
  bool desk_scale = false;
  std::optional<std::vector<std::string>> tasks;
  std::optional<std::uint64_t> seed;
  bool disable_srm = false;
  bool disable_crm = false;
  bool no_dictionary = false;
};

/// Resolves preset -> file -> flags. `--desk-scale` selects the desk preset as
/// the base even when the file names another preset.
RunConfig resolve_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides);

std::vector<std::string> split_list(std::string_view csv);

}  // namespace amir
