#include "amir/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>

#include "amir/checkpoint.hpp"
#include "amir/errors.hpp"
#include "amir/seed.hpp"

namespace amir {

namespace fs = std::filesystem;

torch::Tensor routing_balance(std::span<const GateDecision> gates) {
  if (gates.empty()) return torch::zeros({});
  auto sum = balance_loss(gates.subspan(0, 1));
  for (std::size_t i = 1; i < gates.size(); ++i) sum = sum + balance_loss(gates.subspan(i, 1));
  return sum / static_cast<double>(gates.size());
}

LossTerms total_loss(const torch::Tensor& pred, const torch::Tensor& target, std::span<const GateDecision> gates,
                     double gamma) {
  if (pred.sizes() != target.sizes()) throw_shape("loss inputs differ in shape");
  LossTerms terms;
  terms.l1 = (pred - target).abs().mean();
  terms.balance = routing_balance(gates).to(terms.l1.dtype());
  terms.total = terms.l1 + gamma * terms.balance;
  return terms;
}

double lr_at(std::int64_t t, std::int64_t total, double lr_max, double lr_min) {
  if (total <= 0 || t < 0 || t > total) {
    throw_parameter("iteration " + std::to_string(t) + " outside [0, " + std::to_string(total) + "]");
  }
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

double lr_at(std::int64_t t, const TrainConfig& config) {
  return lr_at(t, config.iterations, config.lr_max, config.lr_min);
}

std::vector<TaskId> resolve_tasks(const Corpus& corpus, const std::vector<std::string>& names) {
  std::vector<TaskId> out;
  for (const auto& n : names) {
    const auto id = corpus.registry().id(n);
    if (!corpus.manifest().tasks.count(n)) throw_config("task '" + n + "' has no sources in the corpus manifest");
    out.push_back(id);
  }
  if (out.empty()) throw_config("no tasks selected");
  return out;
}

namespace {

std::mt19937_64 batch_rng(std::int64_t iteration, std::uint64_t seed) {
  return std::mt19937_64(combine_seed(seed, static_cast<std::uint64_t>(iteration)));
}

TaskId next_task(std::span<const TaskId> tasks, std::mt19937_64& rng) {
  if (tasks.empty()) throw_config("no tasks selected");
  return tasks[std::uniform_int_distribution<std::size_t>(0, tasks.size() - 1)(rng)];
}

}  // namespace

TaskId draw_task(std::span<const TaskId> tasks, std::int64_t iteration, std::uint64_t seed) {
  auto rng = batch_rng(iteration, seed);
  return next_task(tasks, rng);
}

TaskBatch sample_task_batch(const Corpus& corpus, std::span<const TaskId> tasks, std::int64_t iteration,
                            std::uint64_t seed, std::int64_t batch_size, std::int64_t patch_size) {
  auto rng = batch_rng(iteration, seed);
  const TaskId task = next_task(tasks, rng);
  const auto pool = corpus.sources(task, Split::Train);
  if (pool.empty()) throw_data("no training sources for task '" + corpus.registry().name(task) + "'");
  const auto epoch = static_cast<std::uint64_t>(iteration * batch_size) / pool.size();
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<TaskSample> samples;
  samples.reserve(static_cast<std::size_t>(batch_size));
  for (std::int64_t b = 0; b < batch_size; ++b) {
    const auto sample = corpus.sample(task, Split::Train, pick(rng), seed, epoch);
    samples.push_back(sample_patch(sample, patch_size, rng));
  }
  return stack_samples(samples);
}

std::vector<TaskSample> split_samples(const Corpus& corpus, TaskId task, Split split, std::uint64_t seed) {
  std::vector<TaskSample> out;
  const auto pool = corpus.sources(task, split);
  for (std::size_t i = 0; i < pool.size(); ++i) out.push_back(corpus.sample(task, split, i, seed, 0));
  return out;
}

MetricsReport evaluate(AmirModel& model, const Corpus& corpus, std::span<const TaskId> tasks, Split split,
                       std::uint64_t seed) {
  MetricsReport report;
  for (const auto task : tasks) {
    for (const auto& s : split_samples(corpus, task, split, seed)) {
      auto pred = restore_image(model, s.lq).clamp(0.0, 1.0);
      report.add(corpus.registry().name(task), evaluate_pair(pred, s.hq));
    }
  }
  return report;
}

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

Trainer::Trainer(RunConfig config, std::shared_ptr<const Corpus> corpus, fs::path output_dir)
    : config_(std::move(config)), corpus_(std::move(corpus)), output_dir_(std::move(output_dir)) {
  config_.validate();
  if (!corpus_) throw_data("trainer needs a corpus");
  tasks_ = resolve_tasks(*corpus_, config_.train.tasks);
  torch::manual_seed(config_.train.seed);
  model_ = AmirModel(config_.model);
  optimizer_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(config_.train.lr_max).betas({0.9, 0.999}).eps(1e-8).weight_decay(0.0));
  if (!output_dir_.empty()) fs::create_directories(output_dir_);
}

std::unique_ptr<Trainer> Trainer::resume(const fs::path& checkpoint, std::shared_ptr<const Corpus> corpus,
                                         fs::path output_dir) {
  const auto info = read_checkpoint_info(checkpoint);
  auto trainer = std::make_unique<Trainer>(info.config, std::move(corpus), std::move(output_dir));
  load_checkpoint_state(checkpoint, trainer->model_, trainer->optimizer_.get());
  trainer->iteration_ = info.iteration;
  return trainer;
}

StepRecord Trainer::step() {
  const auto& tc = config_.train;
  if (iteration_ >= tc.iterations) throw_parameter("training already finished");
  const double lr = lr_at(iteration_, tc);
  static_cast<torch::optim::AdamOptions&>(optimizer_->param_groups().front().options()).lr(lr);

  auto batch = sample_task_batch(*corpus_, tasks_, iteration_, tc.seed, tc.batch_size, tc.patch_size);
  auto batch_id = [&] {
    std::string ids;
    for (const auto& s : batch.source_ids) ids += (ids.empty() ? "" : ",") + s;
    return "iteration " + std::to_string(iteration_) + " task " + corpus_->registry().name(batch.task) +
           " sources [" + ids + "]";
  };
  auto fail = [&](const std::string& what) {
    if (!output_dir_.empty()) {
      nlohmann::json dump = {{"iteration", iteration_},
                             {"task", corpus_->registry().name(batch.task)},
                             {"sources", batch.source_ids},
                             {"reason", what}};
      std::ofstream(output_dir_ / "nonfinite_batch.json") << dump.dump(2) << "\n";
    }
    throw_numerical(what + " at " + batch_id());
  };

  model_->train();
  ForwardResult result;
  try {
    result = model_->forward(batch.lq);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numerical) throw;
    fail(e.what());
  }
  auto loss = total_loss(result.output, batch.hq, result.gates, tc.balance_weight);
  StepRecord rec;
  rec.task = batch.task;
  rec.lr = lr;
  rec.l1 = loss.l1.item<double>();
  rec.balance = loss.balance.item<double>();
  rec.total = loss.total.item<double>();
  if (!std::isfinite(rec.total)) fail("non-finite loss");

  optimizer_->zero_grad();
  loss.total.backward();
  optimizer_->step();
  rec.iteration = ++iteration_;
  return rec;
}

std::string Trainer::log_header() const {
  std::string h = "iteration,lr,l1,balance,total";
  for (const auto& t : config_.train.tasks) h += "," + t + "_val_psnr," + t + "_val_ssim," + t + "_val_rmse";
  return h;
}

std::string Trainer::format_row(const StepRecord& r, const MetricsReport* validation) const {
  std::string row = std::to_string(r.iteration) + "," + num(r.lr) + "," + num(r.l1) + "," + num(r.balance) + "," +
                    num(r.total);
  for (const auto& t : config_.train.tasks) {
    if (validation) {
      const auto m = validation->task_mean(t);
      row += "," + num(m.psnr) + "," + num(m.ssim) + "," + num(m.rmse);
    } else {
      row += ",,,";
    }
  }
  return row;
}

void Trainer::append_log(const std::string& row) {
  rows_.push_back(row);
  if (output_dir_.empty()) return;
  const auto path = output_dir_ / "metrics.csv";
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << log_header() << "\n";
  out << row << "\n";
}

void Trainer::set_progress(std::ostream* out, std::int64_t every) {
  progress_ = out;
  progress_every_ = every;
}

void Trainer::run(std::int64_t stop) {
  const auto& tc = config_.train;
  if (stop < 0 || stop > tc.iterations) stop = tc.iterations;
  const auto interval = tc.validation_interval();
  while (iteration_ < stop) {
    const auto rec = step();
    const bool validate = rec.iteration % interval == 0 || rec.iteration == tc.iterations;
    MetricsReport report;
    if (validate) report = evaluate(model_, *corpus_, tasks_, Split::Val, tc.seed);
    append_log(format_row(rec, validate ? &report : nullptr));
    if (progress_ && progress_every_ > 0 && rec.iteration % progress_every_ == 0) {
      *progress_ << "iter " << rec.iteration << "/" << tc.iterations << " task "
                 << corpus_->registry().name(rec.task) << " lr " << num(rec.lr) << " l1 " << num(rec.l1)
                 << " balance " << num(rec.balance);
      if (validate) *progress_ << " val_psnr " << num(report.macro_average().psnr);
      *progress_ << std::endl;
    }
    if (!output_dir_.empty() && tc.checkpoint_every > 0 && rec.iteration % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "iter_%08lld", static_cast<long long>(rec.iteration));
      save_checkpoint(output_dir_ / "checkpoints" / name);
    }
  }
  if (!output_dir_.empty() && iteration_ == tc.iterations) save_checkpoint(output_dir_ / "checkpoint");
}

void Trainer::save_checkpoint(const fs::path& dir) {
  amir::save_checkpoint(dir, config_, model_, optimizer_.get(), iteration_);
}

}  // namespace amir
