#include "amir/checkpoint.hpp"

#include <fstream>

#include "amir/errors.hpp"
#include "amir/tensor_io.hpp"

namespace amir {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json shape_of(const torch::Tensor& t) { return json(t.sizes().vec()); }

torch::optim::AdamOptions& adam_options(torch::optim::Adam& optimizer) {
  return static_cast<torch::optim::AdamOptions&>(optimizer.param_groups().front().options());
}

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw_data("no checkpoint manifest in " + dir.string());
  try {
    json j;
    in >> j;
    if (j.value("format", "") != kCheckpointFormat) throw_data("unsupported checkpoint format in " + dir.string());
    return j;
  } catch (const json::exception& e) {
    throw_data("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const RunConfig& config, AmirModel& model, torch::optim::Adam* optimizer,
                     std::int64_t iteration) {
  const fs::path staging = dir.string() + ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging / "params");

  json params = json::array();
  for (const auto& item : model->named_parameters()) {
    const std::string file = "params/" + item.key() + ".bin";
    write_blob(staging / file, item.value());
    params.push_back({{"name", item.key()}, {"shape", shape_of(item.value())}, {"file", file}});
  }

  json manifest = {{"format", kCheckpointFormat},
                   {"iteration", iteration},
                   {"config", to_json(config)},
                   {"seeds", {{"train", config.train.seed}, {"split", config.data.split_seed}}},
                   {"parameters", params}};

  if (optimizer) {
    fs::create_directories(staging / "adam");
    const auto& opts = adam_options(*optimizer);
    json states = json::array();
    auto& state = optimizer->state();
    for (const auto& item : model->named_parameters()) {
      auto it = state.find(item.value().unsafeGetTensorImpl());
      if (it == state.end()) continue;  // no step taken yet
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      const std::string m = "adam/" + item.key() + ".m.bin";
      const std::string v = "adam/" + item.key() + ".v.bin";
      write_blob(staging / m, s.exp_avg());
      write_blob(staging / v, s.exp_avg_sq());
      states.push_back({{"name", item.key()}, {"step", s.step()}, {"exp_avg", m}, {"exp_avg_sq", v}});
    }
    manifest["optimizer"] = {{"type", "adam"},
                             {"lr", opts.lr()},
                             {"betas", {std::get<0>(opts.betas()), std::get<1>(opts.betas())}},
                             {"eps", opts.eps()},
                             {"weight_decay", opts.weight_decay()},
                             {"state", states}};
  }

  std::ofstream(staging / "manifest.json") << manifest.dump(2) << "\n";
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(staging, dir);
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const json j = read_manifest(dir);
  CheckpointInfo info;
  info.config = apply_json(RunConfig::from_preset(j.at("config").value("preset", "paper-default")), j.at("config"));
  info.iteration = j.at("iteration").get<std::int64_t>();
  return info;
}

void load_checkpoint_state(const fs::path& dir, AmirModel& model, torch::optim::Adam* optimizer) {
  const json j = read_manifest(dir);
  std::map<std::string, json> entries;
  for (const auto& p : j.at("parameters")) entries[p.at("name").get<std::string>()] = p;

  torch::NoGradGuard no_grad;
  auto named = model->named_parameters();
  for (auto& item : named) {
    auto it = entries.find(item.key());
    if (it == entries.end()) throw_data("checkpoint lacks parameter '" + item.key() + "'");
    auto stored = read_blob(dir / it->second.at("file").get<std::string>());
    if (stored.sizes() != item.value().sizes()) throw_data("checkpoint parameter '" + item.key() + "' has the wrong shape");
    item.value().copy_(stored);
  }
  if (entries.size() != named.size()) throw_data("checkpoint has parameters the model does not know");

  if (!optimizer || !j.contains("optimizer")) return;
  const auto& o = j.at("optimizer");
  auto& opts = adam_options(*optimizer);
  opts.lr(o.at("lr").get<double>());
  auto& state = optimizer->state();
  state.clear();
  for (const auto& s : o.at("state")) {
    const auto name = s.at("name").get<std::string>();
    auto* param = named.find(name);
    if (!param) throw_data("optimizer state for unknown parameter '" + name + "'");
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(s.at("step").get<std::int64_t>());
    st->exp_avg(read_blob(dir / s.at("exp_avg").get<std::string>()));
    st->exp_avg_sq(read_blob(dir / s.at("exp_avg_sq").get<std::string>()));
    if (st->exp_avg().sizes() != param->sizes()) throw_data("optimizer state for '" + name + "' has the wrong shape");
    state[param->unsafeGetTensorImpl()] = std::move(st);
  }
}

AmirModel load_model(const fs::path& dir) {
  const auto info = read_checkpoint_info(dir);
  AmirModel model(info.config.model);
  load_checkpoint_state(dir, model, nullptr);
  return model;
}

}  // namespace amir
