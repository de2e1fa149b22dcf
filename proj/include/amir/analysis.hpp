#pragma once

// Post-training analysis: the lookahead task-interference matrix, per-router
// expert usage and top-1 paths, instruction export, and importance CV^2.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "amir/backbone.hpp"
#include "amir/corpus.hpp"

namespace amir {

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

/// One batch per task from the first `max_images` images of `split`, centre
/// cropped to a common size that is a multiple of 8.
std::vector<TaskBatch> task_batches(std::span<const std::vector<TaskSample>> per_task, std::size_t max_images = 8);

struct InterferenceMatrix {
  std::vector<std::vector<double>> values;  // percent; NaN where the denominator vanishes
  std::vector<std::string> tasks;
  std::string block;
  double lambda = 0.0;

  /// Header "task,<task_1>,...": row i holds I[i][j] for each j.
  void write_csv(const std::filesystem::path& path) const;
};

/// I[i][j] = 100 (L_i(theta) - L_i(theta - lambda grad L_j)) / (L_i(theta) - L_i(theta - lambda grad L_i)),
/// where only `params` move. Parameters are restored bit-exactly afterwards.
InterferenceMatrix interference_matrix(std::span<torch::Tensor> params, std::size_t num_tasks,
                                       const std::function<torch::Tensor(std::size_t task)>& loss, double lambda);

/// Parameters of one transformer block: "second", "last", or an explicit
/// block prefix such as "encoder2.0.".
std::vector<torch::Tensor> block_parameters(AmirModel& model, const std::string& block);
std::string resolve_block(AmirModel& model, const std::string& block);

/// Per-task L1 restoration loss on `batches[i]`, probed on the named block.
InterferenceMatrix interference_matrix(AmirModel& model, std::span<const TaskBatch> batches,
                                       const std::vector<std::string>& task_names, const std::string& block,
                                       double lambda);

struct ExpertUsageStats {
  std::vector<std::string> tasks;
  // [router][task] -> per-expert frequency of being the first / second choice
  std::vector<std::vector<std::vector<double>>> top1;
  std::vector<std::vector<std::vector<double>>> top2;

  /// Most frequent first choice at each router for `task` (ties -> lowest index).
  std::vector<std::int64_t> path(std::size_t task) const;

  /// Columns: router,task,choice,expert_0..expert_{M-1},path where choice is
  /// top1 or top2 and path is the task's top-1 expert at that router.
  void write_csv(const std::filesystem::path& path) const;
};

/// Accumulates token counts from gate decisions.
class ExpertUsageAccumulator {
 public:
  ExpertUsageAccumulator(std::vector<std::string> tasks, std::int64_t routers, std::int64_t experts);
  void add(std::size_t task, std::size_t router, const GateDecision& decision);
  ExpertUsageStats finalize() const;

 private:
  std::vector<std::string> tasks_;
  std::int64_t experts_;
  std::vector<std::vector<std::vector<std::int64_t>>> first_, second_;
  std::vector<std::vector<std::int64_t>> tokens_;
  bool has_second_ = false;
};

ExpertUsageStats expert_usage(AmirModel& model, std::span<const TaskBatch> batches,
                              const std::vector<std::string>& task_names);

/// Per-router CV^2 of expert importance pooled over all batches.
std::vector<double> importance_cv2(AmirModel& model, std::span<const TaskBatch> batches);

struct InstructionRow {
  std::string task;
  std::string source_id;
  std::vector<double> values;  // 256
};

/// One row per sample: the inferred instruction of the full LQ image.
std::vector<InstructionRow> export_instructions(AmirModel& model, std::span<const TaskSample> samples,
                                                const TaskRegistry& registry);

/// Columns: task,source_id,i_0..i_255.
void write_instructions_csv(const std::filesystem::path& path, std::span<const InstructionRow> rows);

struct CosineSummary {
  double intra = 0.0;  // mean over distinct same-task pairs
  double inter = 0.0;  // mean over cross-task pairs
};

CosineSummary instruction_similarity(std::span<const InstructionRow> rows);

}  // namespace amir
