#pragma once

// Multi-task training: composite L1 + gamma * balance loss, cosine learning-rate
// schedule, one-task-per-batch sampling, validation, CSV metric log and
// checkpoint/resume.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "amir/backbone.hpp"
#include "amir/config.hpp"
#include "amir/corpus.hpp"
#include "amir/metrics.hpp"

namespace amir {

struct LossTerms {
  torch::Tensor l1;
  torch::Tensor balance;  // mean CV^2 over spatial routers; 0 without routers
  torch::Tensor total;
};

/// Mean over routers of the per-router importance CV^2; zero when `gates` is empty.
torch::Tensor routing_balance(std::span<const GateDecision> gates);

/// L1(pred, target) + gamma * routing_balance(gates).
LossTerms total_loss(const torch::Tensor& pred, const torch::Tensor& target, std::span<const GateDecision> gates,
                     double gamma);

/// lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double lr_at(std::int64_t t, std::int64_t total, double lr_max, double lr_min);
double lr_at(std::int64_t t, const TrainConfig& config);

std::vector<TaskId> resolve_tasks(const Corpus& corpus, const std::vector<std::string>& names);

/// The task of batch `iteration`: uniform over `tasks`, a pure function of (seed, iteration).
TaskId draw_task(std::span<const TaskId> tasks, std::int64_t iteration, std::uint64_t seed);

/// Draws one task uniformly, then `batch_size` training sources of that task
/// and a random patch from each. Pure function of (seed, iteration).
TaskBatch sample_task_batch(const Corpus& corpus, std::span<const TaskId> tasks, std::int64_t iteration,
                            std::uint64_t seed, std::int64_t batch_size, std::int64_t patch_size);

/// Full-image pairs of one split (noise seeded with epoch 0).
std::vector<TaskSample> split_samples(const Corpus& corpus, TaskId task, Split split, std::uint64_t seed);

/// Restores every image of `split` for each task and averages PSNR/SSIM/RMSE;
/// predictions are clamped to [0, 1].
MetricsReport evaluate(AmirModel& model, const Corpus& corpus, std::span<const TaskId> tasks, Split split,
                       std::uint64_t seed);

struct StepRecord {
  std::int64_t iteration = 0;  // count of completed steps
  TaskId task;
  double lr = 0.0;
  double l1 = 0.0;
  double balance = 0.0;
  double total = 0.0;
};

class Trainer {
 public:
  /// Seeds torch with `config.train.seed` and initializes a fresh model. With
  /// an empty `output_dir` nothing is written to disk.
  Trainer(RunConfig config, std::shared_ptr<const Corpus> corpus, std::filesystem::path output_dir = {});

  /// Continues from a checkpoint written by `save_checkpoint`.
  static std::unique_ptr<Trainer> resume(const std::filesystem::path& checkpoint, std::shared_ptr<const Corpus> corpus,
                                         std::filesystem::path output_dir = {});

  /// One optimizer step. A non-finite loss writes `nonfinite_batch.json` into
  /// the output directory and throws a numerical error naming the batch.
  StepRecord step();

  /// Steps until `stop` (default: configured iterations), logging every step,
  /// validating on schedule and checkpointing. The final checkpoint is written
  /// to `<output_dir>/checkpoint` when the run reaches its last iteration.
  void run(std::int64_t stop = -1);

  void save_checkpoint(const std::filesystem::path& dir);

  /// Emits a progress line to `out` every `every` steps.
  void set_progress(std::ostream* out, std::int64_t every);

  AmirModel& model() { return model_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  const RunConfig& config() const { return config_; }
  const Corpus& corpus() const { return *corpus_; }
  std::span<const TaskId> tasks() const { return tasks_; }
  std::int64_t iteration() const { return iteration_; }

  /// Header and rows of the metric log, as written to metrics.csv.
  std::string log_header() const;
  const std::vector<std::string>& log_rows() const { return rows_; }

 private:
  std::string format_row(const StepRecord& record, const MetricsReport* validation) const;
  void append_log(const std::string& row);

  RunConfig config_;
  std::shared_ptr<const Corpus> corpus_;
  std::filesystem::path output_dir_;
  std::vector<TaskId> tasks_;
  AmirModel model_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::int64_t iteration_ = 0;
  std::vector<std::string> rows_;
  std::ostream* progress_ = nullptr;
  std::int64_t progress_every_ = 0;
};

}  // namespace amir
