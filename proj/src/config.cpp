#include "amir/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "toml.hpp"

#include "amir/errors.hpp"

namespace amir {

using nlohmann::json;

namespace {

template <typename T>
std::string show(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// Reads typed keys from one JSON object and remembers which were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw_config("'" + prefix_ + "' must be a table");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) reject(key, v, "expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) reject(key, v, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
          out = v.get<T>();
        } else {
          reject(key, v, "expected a non-negative integer");
        }
      } else {
        out = v.get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) reject(key, v, "expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) reject(key, v, "expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) reject(key, v, "expected a list of strings");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_string()) reject(key, v, "expected a list of strings");
        out.push_back(e.get<std::string>());
      }
    } else {
      // fixed-size integer arrays
      if (!v.is_array() || v.size() != out.size()) {
        reject(key, v, "expected a list of " + std::to_string(out.size()) + " integers");
      }
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!v[i].is_number_integer()) reject(key, v, "expected a list of integers");
        out[i] = v[i].template get<typename T::value_type>();
      }
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  void mark(const std::string& key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw_config("unknown key '" + qualified(key) + "'");
    }
  }

 private:
  std::string qualified(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  [[noreturn]] void reject(const std::string& key, const json& v, const std::string& why) const {
    throw_config("invalid value " + v.dump() + " for key '" + qualified(key) + "': " + why);
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json j = json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = node.as_array()) {
    json j = json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw_config("unsupported TOML value (dates and times are not accepted)");
}

}  // namespace

void TrainConfig::validate() const {
  if (tasks.empty()) throw_config("train.tasks=[] violates: at least one task is required");
  std::set<std::string> unique(tasks.begin(), tasks.end());
  if (unique.size() != tasks.size()) throw_config("train.tasks lists a task more than once");
  if (patch_size < 32 || patch_size % 8 != 0) {
    throw_config("train.patch_size=" + std::to_string(patch_size) + " violates patch_size >= 32 and divisible by 8");
  }
  if (batch_size < 1) throw_config("train.batch_size=" + std::to_string(batch_size) + " violates batch_size >= 1");
  if (iterations < 1) throw_config("train.iterations=" + std::to_string(iterations) + " violates iterations >= 1");
  if (!(lr_max > 0.0)) throw_config("train.lr_max=" + show(lr_max) + " violates lr_max > 0");
  if (!(lr_min >= 0.0) || !(lr_min < lr_max)) {
    throw_config("train.lr_min=" + show(lr_min) + " violates 0 <= lr_min < lr_max (lr_max=" + show(lr_max) + ")");
  }
  if (!(balance_weight >= 0.0)) {
    throw_config("train.balance_weight=" + show(balance_weight) + " violates balance_weight >= 0");
  }
  if (validate_every < 0) throw_config("train.validate_every must be >= 0");
  if (checkpoint_every < 0) throw_config("train.checkpoint_every must be >= 0");
}

std::int64_t TrainConfig::validation_interval() const {
  if (validate_every > 0) return validate_every;
  return std::max<std::int64_t>(iterations / 100, 100);
}

CorpusManifest DataConfig::corpus_manifest(const std::filesystem::path& data_root) const {
  if (manifest) {
    const auto path = manifest->is_absolute() ? *manifest : data_root / *manifest;
    return CorpusManifest::load(path, data_root);
  }
  return CorpusManifest::synthetic(synthetic_count, synthetic_size, split_seed);
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (!data.manifest) {
    if (data.synthetic_count < 3) {
      throw_config("data.synthetic_count=" + std::to_string(data.synthetic_count) + " violates synthetic_count >= 3");
    }
    if (data.synthetic_size < train.patch_size || data.synthetic_size % 2 != 0) {
      throw_config("data.synthetic_size=" + std::to_string(data.synthetic_size) +
                   " violates: even and >= train.patch_size (" + std::to_string(train.patch_size) + ")");
    }
    for (const auto& t : train.tasks) {
      if (t != "sr" && t != "denoise" && t != "synth") {
        throw_config("train.tasks contains unknown task '" + t + "' (expected sr, denoise, synth)");
      }
    }
  }
}

RunConfig RunConfig::paper_default() {
  RunConfig c;
  c.preset = "paper-default";
  c.model = AmirConfig::paper_default();
  return c;
}

RunConfig RunConfig::desk_scale() {
  RunConfig c;
  c.preset = "desk-scale";
  c.model = AmirConfig::desk_scale();
  c.train.patch_size = 32;
  c.train.iterations = 2000;
  c.train.desk_scale = true;
  c.data.synthetic_count = 80;
  c.data.synthetic_size = 64;
  return c;
}

RunConfig RunConfig::from_preset(std::string_view name) {
  if (name == "paper-default") return paper_default();
  if (name == "desk-scale") return desk_scale();
  throw_config("invalid value \"" + std::string(name) + "\" for key 'preset': expected paper-default or desk-scale");
}

json to_json(const AmirConfig& c) {
  return {{"channels", c.channels},
          {"blocks", c.blocks},
          {"refinement_blocks", c.refinement_blocks},
          {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},
          {"dictionary_size", c.dictionary_size},
          {"experts", c.experts},
          {"top_k", c.top_k},
          {"enable_srm", c.enable_srm},
          {"enable_crm", c.enable_crm},
          {"use_dictionary", c.use_dictionary}};
}

json to_json(const TrainConfig& c) {
  return {{"tasks", c.tasks},
          {"patch_size", c.patch_size},
          {"batch_size", c.batch_size},
          {"iterations", c.iterations},
          {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"balance_weight", c.balance_weight},
          {"seed", c.seed},
          {"validate_every", c.validate_every},
          {"checkpoint_every", c.checkpoint_every}};
}

json to_json(const DataConfig& c) {
  json j = {{"synthetic_count", c.synthetic_count},
            {"synthetic_size", c.synthetic_size},
            {"split_seed", c.split_seed}};
  if (c.manifest) j["manifest"] = c.manifest->string();
  return j;
}

json to_json(const RunConfig& c) {
  return {{"preset", c.preset}, {"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

RunConfig apply_json(RunConfig base, const json& j) {
  Section top(j, "");
  std::string preset = base.preset;
  top.read("preset", preset);
  if (preset != base.preset) {
    base = RunConfig::from_preset(preset);
  }
  if (top.has("model")) {
    Section s(j.at("model"), "model");
    auto& m = base.model;
    s.read("channels", m.channels);
    s.read("blocks", m.blocks);
    s.read("refinement_blocks", m.refinement_blocks);
    s.read("heads", m.heads);
    s.read("ffn_expansion", m.ffn_expansion);
    s.read("dictionary_size", m.dictionary_size);
    s.read("experts", m.experts);
    s.read("top_k", m.top_k);
    s.read("enable_srm", m.enable_srm);
    s.read("enable_crm", m.enable_crm);
    s.read("use_dictionary", m.use_dictionary);
    s.finish();
  }
  if (top.has("train")) {
    Section s(j.at("train"), "train");
    auto& t = base.train;
    s.read("tasks", t.tasks);
    s.read("patch_size", t.patch_size);
    s.read("batch_size", t.batch_size);
    s.read("iterations", t.iterations);
    s.read("lr_max", t.lr_max);
    s.read("lr_min", t.lr_min);
    s.read("balance_weight", t.balance_weight);
    s.read("seed", t.seed);
    s.read("validate_every", t.validate_every);
    s.read("checkpoint_every", t.checkpoint_every);
    s.finish();
  }
  if (top.has("data")) {
    Section s(j.at("data"), "data");
    auto& d = base.data;
    std::string manifest;
    s.read("manifest", manifest);
    if (!manifest.empty()) d.manifest = manifest;
    s.read("synthetic_count", d.synthetic_count);
    s.read("synthetic_size", d.synthetic_size);
    s.read("split_seed", d.split_seed);
    s.finish();
  }
  top.mark("model");
  top.mark("train");
  top.mark("data");
  top.finish();
  base.validate();
  return base;
}

json read_config_tree(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw_config("config file " + path.string() + " does not exist");
  if (path.extension() == ".json") {
    std::ifstream in(path);
    try {
      json j;
      in >> j;
      return j.is_null() ? json::object() : j;
    } catch (const json::exception& e) {
      throw_config("cannot parse " + path.string() + ": " + e.what());
    }
  }
  try {
    return toml_to_json(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "cannot parse " << path.string() << " at line " << e.source().begin.line << ": " << e.description();
    throw_config(os.str());
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides) {
  json tree = path ? read_config_tree(*path) : json::object();
  RunConfig base = RunConfig::paper_default();
  if (overrides.desk_scale) {
    base = RunConfig::desk_scale();
    tree.erase("preset");
  }
  RunConfig c = apply_json(base, tree);
  if (overrides.tasks) c.train.tasks = *overrides.tasks;
  if (overrides.seed) c.train.seed = *overrides.seed;
  if (overrides.disable_srm) c.model.enable_srm = false;
  if (overrides.disable_crm) c.model.enable_crm = false;
  if (overrides.no_dictionary) c.model.use_dictionary = false;
  c.validate();
  return c;
}

std::vector<std::string> split_list(std::string_view csv) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto end = csv.find(',', start);
    auto item = csv.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.emplace_back(item);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

}  // namespace amir
