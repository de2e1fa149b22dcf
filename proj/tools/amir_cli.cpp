// amir: train, evaluate, degrade and analyze from the command line.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amir/analysis.hpp"
#include "amir/checkpoint.hpp"
#include "amir/config.hpp"
#include "amir/corpus.hpp"
#include "amir/errors.hpp"
#include "amir/image_io.hpp"
#include "amir/seed.hpp"
#include "amir/tensor_io.hpp"
#include "amir/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;

struct CommonData {
  std::string data_dir;

  fs::path root() const { return data_dir.empty() ? amir::default_data_root() : fs::path(data_dir); }
};

std::shared_ptr<const amir::Corpus> build_corpus(const amir::RunConfig& config, const CommonData& data) {
  return std::make_shared<const amir::Corpus>(config.data.corpus_manifest(data.root()));
}

struct TrainArgs {
  std::string config;
  std::string tasks;
  bool desk_scale = false;
  bool disable_srm = false;
  bool disable_crm = false;
  bool no_dictionary = false;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/amir";
  std::string resume;
  std::int64_t progress = 50;
};

int run_train(const TrainArgs& a, const CommonData& data) {
  std::unique_ptr<amir::Trainer> trainer;
  if (!a.resume.empty()) {
    const auto info = amir::read_checkpoint_info(a.resume);
    trainer = amir::Trainer::resume(a.resume, build_corpus(info.config, data), a.out);
  } else {
    amir::ConfigOverrides o;
    o.desk_scale = a.desk_scale;
    if (!a.tasks.empty()) o.tasks = amir::split_list(a.tasks);
    o.seed = a.seed;
    o.disable_srm = a.disable_srm;
    o.disable_crm = a.disable_crm;
    o.no_dictionary = a.no_dictionary;
    const auto config = amir::resolve_config(a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config), o);
    fs::create_directories(a.out);
    fs::remove(fs::path(a.out) / "metrics.csv");
    std::ofstream(fs::path(a.out) / "config.json") << amir::to_json(config).dump(2) << "\n";
    trainer = std::make_unique<amir::Trainer>(config, build_corpus(config, data), a.out);
  }
  std::cerr << "parameters: " << amir::count_parameters(*trainer->model()) << "\n";
  trainer->set_progress(&std::cerr, a.progress);
  trainer->run();
  std::cout << "checkpoint: " << (fs::path(a.out) / "checkpoint").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::string out = "metrics.json";
};

int run_eval(const EvalArgs& a, const CommonData& data) {
  const auto info = amir::read_checkpoint_info(a.checkpoint);
  auto model = amir::load_model(a.checkpoint);
  auto corpus = build_corpus(info.config, data);
  const auto tasks = amir::resolve_tasks(*corpus, info.config.train.tasks);
  const auto split = amir::parse_split(a.split);
  const auto report = amir::evaluate(model, *corpus, tasks, split, info.config.train.seed);
  json j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["split"] = a.split;
  j["iteration"] = info.iteration;
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  std::ofstream(a.out) << j.dump(2) << "\n";
  const auto avg = report.macro_average();
  std::cout << "average psnr " << avg.psnr << " ssim " << avg.ssim << " rmse " << avg.rmse << "\n";
  return 0;
}

struct DegradeArgs {
  std::string input;
  std::string task;
  std::string out;
  std::uint64_t seed = 0;
  amir::DegradationParams params;
  double poisson_scale = 400.0;
  bool no_poisson = false;
};

int run_degrade(DegradeArgs a) {
  a.params.poisson_scale = a.no_poisson ? std::nullopt : std::optional<double>(a.poisson_scale);
  const auto registry = amir::TaskRegistry::with_defaults(a.params);
  const auto task = registry.id(a.task);
  if (!fs::is_directory(a.input)) amir::throw_data("input directory " + a.input + " does not exist");

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.input)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(a.out);

  json pairs = json::array();
  std::size_t failed = 0;
  for (const auto& f : files) {
    torch::Tensor hq;
    try {
      hq = amir::read_png(f);
    } catch (const amir::Error& e) {
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      ++failed;
      continue;
    }
    // the k-space operator needs even dimensions
    hq = hq.narrow(0, 0, hq.size(0) - hq.size(0) % 2).narrow(1, 0, hq.size(1) - hq.size(1) % 2).contiguous();
    const std::string id = a.task + "/" + f.stem().string();
    const auto lq = registry.degrade(task, hq, amir::sample_seed(a.seed, id, 0));
    const std::string stem = f.stem().string();
    amir::write_blob(fs::path(a.out) / (stem + ".lq.bin"), lq);
    amir::write_blob(fs::path(a.out) / (stem + ".hq.bin"), hq);
    pairs.push_back({{"id", id}, {"lq", stem + ".lq.bin"}, {"hq", stem + ".hq.bin"}, {"shape", hq.sizes().vec()}});
  }
  if (pairs.empty()) amir::throw_data("no readable PNG images in " + a.input);

  json manifest = {{"task", a.task},
                   {"seed", a.seed},
                   {"degradation",
                    {{"kspace_factor", a.params.kspace_factor},
                     {"noise_sigma", a.params.noise_sigma},
                     {"poisson_scale", a.params.poisson_scale ? json(*a.params.poisson_scale) : json(nullptr)},
                     {"dose_reduction", a.params.dose_reduction},
                     {"count_scale", a.params.count_scale}}},
                   {"pairs", pairs}};
  std::ofstream(fs::path(a.out) / "manifest.json") << manifest.dump(2) << "\n";
  std::cout << pairs.size() << " pairs written, " << failed << " skipped\n";
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string out;
  std::string split = "val";
  std::string block = "second";
  double lambda = 0.0;  // 0: learning rate at the checkpoint's iteration
  std::size_t images = 8;
};

struct Loaded {
  amir::CheckpointInfo info;
  amir::AmirModel model{nullptr};
  std::shared_ptr<const amir::Corpus> corpus;
  std::vector<amir::TaskId> tasks;
  std::vector<std::string> names;
};

Loaded load(const AnalyzeArgs& a, const CommonData& data) {
  Loaded l;
  l.info = amir::read_checkpoint_info(a.checkpoint);
  l.model = amir::load_model(a.checkpoint);
  l.corpus = build_corpus(l.info.config, data);
  l.tasks = amir::resolve_tasks(*l.corpus, l.info.config.train.tasks);
  for (auto t : l.tasks) l.names.push_back(l.corpus->registry().name(t));
  return l;
}

std::vector<std::vector<amir::TaskSample>> per_task_samples(const Loaded& l, const std::string& split) {
  std::vector<std::vector<amir::TaskSample>> out;
  for (auto t : l.tasks) {
    out.push_back(amir::split_samples(*l.corpus, t, amir::parse_split(split), l.info.config.train.seed));
  }
  return out;
}

int run_interference(const AnalyzeArgs& a, const CommonData& data) {
  auto l = load(a, data);
  const auto batches = amir::task_batches(per_task_samples(l, a.split), a.images);
  const auto& tc = l.info.config.train;
  const double lambda =
      a.lambda > 0.0 ? a.lambda : amir::lr_at(std::min(l.info.iteration, tc.iterations), tc);
  const auto m = amir::interference_matrix(l.model, batches, l.names, a.block, lambda);
  m.write_csv(a.out);
  std::cout << "block " << m.block << " lambda " << m.lambda << " -> " << a.out << "\n";
  return 0;
}

int run_experts(const AnalyzeArgs& a, const CommonData& data) {
  auto l = load(a, data);
  const auto batches = amir::task_batches(per_task_samples(l, a.split), a.images);
  const auto stats = amir::expert_usage(l.model, batches, l.names);
  stats.write_csv(a.out);
  for (std::size_t t = 0; t < l.names.size(); ++t) {
    std::cout << l.names[t] << " path";
    for (auto e : stats.path(t)) std::cout << " " << e;
    std::cout << "\n";
  }
  return 0;
}

int run_instructions(const AnalyzeArgs& a, const CommonData& data) {
  auto l = load(a, data);
  std::vector<amir::TaskSample> samples;
  for (auto& s : per_task_samples(l, a.split)) samples.insert(samples.end(), s.begin(), s.end());
  const auto rows = amir::export_instructions(l.model, samples, l.corpus->registry());
  amir::write_instructions_csv(a.out, rows);
  const auto sim = amir::instruction_similarity(rows);
  std::cout << rows.size() << " rows; mean cosine intra " << sim.intra << " inter " << sim.inter << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"All-in-one medical image restoration with task-adaptive routing"};
  app.require_subcommand(1);
  CommonData data;
  app.add_option("--data-dir", data.data_dir, "Corpus root (default: $AMIR_DATA_DIR or the working directory)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", train.config, "TOML (or .json) configuration file");
  t->add_option("--tasks", train.tasks, "Comma-separated task subset, e.g. sr,denoise,synth");
  t->add_flag("--desk-scale", train.desk_scale, "Use the small CPU preset (C=16, blocks 1/1/1/2/1, patch 32)");
  t->add_flag("--disable-srm", train.disable_srm, "Remove the spatial routers");
  t->add_flag("--disable-crm", train.disable_crm, "Remove the channel routers");
  t->add_flag("--no-dictionary", train.no_dictionary, "Use the encoder output directly as the instruction");
  t->add_option("--seed", train.seed, "Global seed (overrides the file)");
  t->add_option("--out", train.out, "Output directory for metrics.csv and checkpoints")->capture_default_str();
  t->add_option("--resume", train.resume, "Continue from a checkpoint directory");
  t->add_option("--progress", train.progress, "Progress line every N iterations (0 = silent)")->capture_default_str();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  e->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  e->add_option("--out", eval.out, "Metrics JSON")->capture_default_str();

  DegradeArgs degrade;
  auto* d = app.add_subcommand("degrade", "Write cached LQ/HQ pairs for a directory of PNGs");
  d->add_option("--input", degrade.input, "Directory of 8- or 16-bit grayscale PNGs")->required();
  d->add_option("--task", degrade.task, "sr, denoise or synth")->required();
  d->add_option("--out", degrade.out, "Output directory")->required();
  d->add_option("--seed", degrade.seed, "Noise seed")->capture_default_str();
  d->add_option("--kspace-factor", degrade.params.kspace_factor, "k-space crop factor")->capture_default_str();
  d->add_option("--noise-sigma", degrade.params.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  d->add_option("--poisson-scale", degrade.poisson_scale, "Poisson photon scale")->capture_default_str();
  d->add_flag("--no-poisson", degrade.no_poisson, "Disable the Poisson term");
  d->add_option("--dose-reduction", degrade.params.dose_reduction, "Count thinning factor")->capture_default_str();
  d->add_option("--count-scale", degrade.params.count_scale, "Expected counts at intensity 1")->capture_default_str();

  auto* an = app.add_subcommand("analyze", "Routing and interference analysis of a checkpoint");
  an->require_subcommand(1);
  AnalyzeArgs inter, experts, instr;
  auto add_common = [](CLI::App* sub, AnalyzeArgs& args, const char* split) {
    args.split = split;
    sub->add_option("--checkpoint", args.checkpoint, "Checkpoint directory")->required();
    sub->add_option("--out", args.out, "Output CSV")->required();
    sub->add_option("--split", args.split, "Images to analyze: train, val or test")->capture_default_str();
  };
  auto* ai = an->add_subcommand("interference", "Task interference matrix at one block");
  add_common(ai, inter, "val");
  ai->add_option("--block", inter.block, "second, last, or a block prefix such as encoder2.0.")->capture_default_str();
  ai->add_option("--lambda", inter.lambda, "Probe step (default: learning rate at the checkpoint)");
  ai->add_option("--images", inter.images, "Images per task")->capture_default_str();
  auto* ae = an->add_subcommand("experts", "Expert selection frequencies and top-1 paths");
  add_common(ae, experts, "test");
  ae->add_option("--images", experts.images, "Images per task")->capture_default_str();
  auto* ainst = an->add_subcommand("instructions", "Export inferred instruction vectors");
  add_common(ainst, instr, "test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (t->parsed()) return run_train(train, data);
    if (e->parsed()) return run_eval(eval, data);
    if (d->parsed()) return run_degrade(degrade);
    if (ai->parsed()) return run_interference(inter, data);
    if (ae->parsed()) return run_experts(experts, data);
    if (ainst->parsed()) return run_instructions(instr, data);
  } catch (const amir::Error& err) {
    std::cerr << err.what() << "\n";
    return err.exit_code();
  } catch (const fs::filesystem_error& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kDataExit;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
