#include "amir/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "amir/errors.hpp"

namespace amir {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw_data("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<TaskBatch> task_batches(std::span<const std::vector<TaskSample>> per_task, std::size_t max_images) {
  std::vector<TaskBatch> out;
  for (const auto& samples : per_task) {
    if (samples.empty()) throw_data("a task has no images in the requested split");
    const auto n = std::min(max_images, samples.size());
    std::int64_t h = samples[0].hq.size(0), w = samples[0].hq.size(1);
    for (std::size_t i = 0; i < n; ++i) {
      h = std::min(h, samples[i].hq.size(0));
      w = std::min(w, samples[i].hq.size(1));
    }
    h -= h % 8;
    w -= w % 8;
    if (h < 32 || w < 32) throw_shape("analysis images must be at least 32x32");
    std::vector<TaskSample> cropped;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = samples[i];
      const auto top = (s.hq.size(0) - h) / 2;
      const auto left = (s.hq.size(1) - w) / 2;
      auto crop = [&](const torch::Tensor& t) { return t.narrow(0, top, h).narrow(1, left, w).contiguous(); };
      cropped.push_back({s.task, crop(s.lq), crop(s.hq), s.source_id});
    }
    out.push_back(stack_samples(cropped));
  }
  return out;
}

void InterferenceMatrix::write_csv(const std::filesystem::path& path) const {
  auto out = open_csv(path);
  out << "# block=" << block << " lambda=" << num(lambda) << "\n";
  out << "task";
  for (const auto& t : tasks) out << "," << t;
  out << "\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << tasks[i];
    for (double v : values[i]) out << "," << num(v);
    out << "\n";
  }
}

InterferenceMatrix interference_matrix(std::span<torch::Tensor> params, std::size_t num_tasks,
                                       const std::function<torch::Tensor(std::size_t)>& loss, double lambda) {
  if (num_tasks == 0) throw_parameter("interference needs at least one task");
  if (!(lambda > 0.0)) throw_parameter("interference step lambda must be positive");
  if (params.empty()) throw_parameter("interference needs a non-empty parameter block");

  std::vector<torch::Tensor> backup;
  for (const auto& p : params) backup.push_back(p.detach().clone());

  auto eval = [&](std::size_t i) {
    torch::NoGradGuard no_grad;
    return loss(i).item<double>();
  };
  std::vector<double> base(num_tasks);
  for (std::size_t i = 0; i < num_tasks; ++i) base[i] = eval(i);

  std::vector<torch::Tensor> inputs(params.begin(), params.end());
  // after[i][j]: task i's loss once task j's step has been applied
  std::vector<std::vector<double>> after(num_tasks, std::vector<double>(num_tasks));
  for (std::size_t j = 0; j < num_tasks; ++j) {
    auto grads = torch::autograd::grad({loss(j)}, inputs, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                       /*allow_unused=*/true);
    {
      torch::NoGradGuard no_grad;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (grads[k].defined()) inputs[k].sub_(lambda * grads[k]);
      }
    }
    for (std::size_t i = 0; i < num_tasks; ++i) after[i][j] = eval(i);
    torch::NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k].copy_(backup[k]);
  }

  InterferenceMatrix m;
  m.lambda = lambda;
  m.values.assign(num_tasks, std::vector<double>(num_tasks, kUndefined));
  for (std::size_t i = 0; i < num_tasks; ++i) {
    const double denom = base[i] - after[i][i];
    if (denom == 0.0 || !std::isfinite(denom)) continue;
    for (std::size_t j = 0; j < num_tasks; ++j) m.values[i][j] = 100.0 * ((base[i] - after[i][j]) / denom);
  }
  return m;
}

std::string resolve_block(AmirModel& model, const std::string& block) {
  const auto prefixes = model->block_prefixes();
  if (prefixes.empty()) throw_invariant("model has no transformer blocks");
  if (block == "second") {
    if (prefixes.size() < 2) throw_config("model has fewer than two blocks");
    return prefixes[1];
  }
  if (block == "last") return prefixes.back();
  if (std::find(prefixes.begin(), prefixes.end(), block) != prefixes.end()) return block;
  throw_config("invalid value '" + block + "' for block: expected second, last or a block prefix such as " +
               prefixes.front());
}

std::vector<torch::Tensor> block_parameters(AmirModel& model, const std::string& block) {
  const auto prefix = resolve_block(model, block);
  std::vector<torch::Tensor> out;
  for (const auto& item : model->named_parameters()) {
    if (item.key().rfind(prefix, 0) == 0) out.push_back(item.value());
  }
  return out;
}

InterferenceMatrix interference_matrix(AmirModel& model, std::span<const TaskBatch> batches,
                                       const std::vector<std::string>& task_names, const std::string& block,
                                       double lambda) {
  if (batches.size() != task_names.size()) throw_parameter("one batch per task is required");
  auto params = block_parameters(model, block);
  const bool was_training = model->is_training();
  model->eval();
  auto loss = [&](std::size_t i) {
    const auto& b = batches[i];
    // reduce in double: lookahead deltas at small lambda sit near float32 resolution
    return (model->forward(b.lq).output.to(torch::kFloat64) - b.hq.to(torch::kFloat64)).abs().mean();
  };
  auto m = interference_matrix(params, batches.size(), loss, lambda);
  model->train(was_training);
  m.tasks = task_names;
  m.block = resolve_block(model, block);
  return m;
}

std::vector<std::int64_t> ExpertUsageStats::path(std::size_t task) const {
  std::vector<std::int64_t> out;
  for (const auto& router : top1) {
    const auto& f = router.at(task);
    out.push_back(std::max_element(f.begin(), f.end()) - f.begin());
  }
  return out;
}

void ExpertUsageStats::write_csv(const std::filesystem::path& file) const {
  auto out = open_csv(file);
  const std::size_t experts = top1.empty() || top1[0].empty() ? 0 : top1[0][0].size();
  out << "router,task,choice";
  for (std::size_t e = 0; e < experts; ++e) out << ",expert_" << e;
  out << ",path\n";
  for (std::size_t r = 0; r < top1.size(); ++r) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const auto p = path(t)[r];
      auto row = [&](const char* choice, const std::vector<double>& f) {
        out << r + 1 << "," << tasks[t] << "," << choice;
        for (double v : f) out << "," << num(v);
        out << "," << p << "\n";
      };
      row("top1", top1[r][t]);
      if (!top2.empty()) row("top2", top2[r][t]);
    }
  }
}

ExpertUsageAccumulator::ExpertUsageAccumulator(std::vector<std::string> tasks, std::int64_t routers,
                                               std::int64_t experts)
    : tasks_(std::move(tasks)), experts_(experts) {
  const auto r = static_cast<std::size_t>(routers);
  const auto zeros = std::vector<std::int64_t>(static_cast<std::size_t>(experts), 0);
  first_.assign(r, std::vector<std::vector<std::int64_t>>(tasks_.size(), zeros));
  second_ = first_;
  tokens_.assign(r, std::vector<std::int64_t>(tasks_.size(), 0));
}

void ExpertUsageAccumulator::add(std::size_t task, std::size_t router, const GateDecision& decision) {
  if (router >= first_.size() || task >= tasks_.size()) throw_parameter("usage index out of range");
  if (decision.num_experts() != experts_) throw_shape("gate width differs from the expert count");
  auto sel = decision.selected.to(torch::kCPU, torch::kLong).contiguous();
  const auto* p = sel.data_ptr<std::int64_t>();
  const auto k = sel.size(1);
  for (std::int64_t t = 0; t < sel.size(0); ++t) {
    ++first_[router][task][static_cast<std::size_t>(p[t * k])];
    if (k >= 2) ++second_[router][task][static_cast<std::size_t>(p[t * k + 1])];
  }
  tokens_[router][task] += sel.size(0);
  has_second_ = has_second_ || k >= 2;
}

ExpertUsageStats ExpertUsageAccumulator::finalize() const {
  ExpertUsageStats s;
  s.tasks = tasks_;
  auto norm = [&](const std::vector<std::vector<std::vector<std::int64_t>>>& counts) {
    std::vector<std::vector<std::vector<double>>> out(counts.size());
    for (std::size_t r = 0; r < counts.size(); ++r) {
      for (std::size_t t = 0; t < counts[r].size(); ++t) {
        std::vector<double> f(counts[r][t].size(), 0.0);
        const auto n = tokens_[r][t];
        for (std::size_t e = 0; e < f.size() && n > 0; ++e) {
          f[e] = static_cast<double>(counts[r][t][e]) / static_cast<double>(n);
        }
        out[r].push_back(std::move(f));
      }
    }
    return out;
  };
  s.top1 = norm(first_);
  if (has_second_) s.top2 = norm(second_);
  return s;
}

ExpertUsageStats expert_usage(AmirModel& model, std::span<const TaskBatch> batches,
                              const std::vector<std::string>& task_names) {
  if (batches.size() != task_names.size()) throw_parameter("one batch per task is required");
  if (model->spatial_router_count() == 0) throw_config("model has no spatial routers");
  ExpertUsageAccumulator acc(task_names, model->spatial_router_count(), model->config().experts);
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const auto result = model->forward(batches[t].lq);
    for (std::size_t r = 0; r < result.gates.size(); ++r) acc.add(t, r, result.gates[r]);
  }
  model->train(was_training);
  return acc.finalize();
}

std::vector<double> importance_cv2(AmirModel& model, std::span<const TaskBatch> batches) {
  if (model->spatial_router_count() == 0) throw_config("model has no spatial routers");
  std::vector<std::vector<GateDecision>> per_router(static_cast<std::size_t>(model->spatial_router_count()));
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  for (const auto& b : batches) {
    const auto result = model->forward(b.lq);
    for (std::size_t r = 0; r < result.gates.size(); ++r) per_router[r].push_back(result.gates[r]);
  }
  model->train(was_training);
  std::vector<double> out;
  for (const auto& decisions : per_router) out.push_back(balance_loss(decisions).item<double>());
  return out;
}

std::vector<InstructionRow> export_instructions(AmirModel& model, std::span<const TaskSample> samples,
                                                const TaskRegistry& registry) {
  if (!model->instruction_network()) throw_config("model has no routing instruction network");
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  std::vector<InstructionRow> rows;
  for (const auto& s : samples) {
    auto v = model->infer_instruction(s.lq.unsqueeze(0).unsqueeze(0)).vector[0].to(torch::kFloat64).contiguous();
    const auto* p = v.data_ptr<double>();
    rows.push_back({registry.name(s.task), s.source_id, std::vector<double>(p, p + v.numel())});
  }
  model->train(was_training);
  return rows;
}

void write_instructions_csv(const std::filesystem::path& path, std::span<const InstructionRow> rows) {
  auto out = open_csv(path);
  out << "task,source_id";
  const std::size_t dim = rows.empty() ? static_cast<std::size_t>(kInstructionDim) : rows.front().values.size();
  for (std::size_t i = 0; i < dim; ++i) out << ",i_" << i;
  out << "\n";
  for (const auto& r : rows) {
    out << r.task << "," << r.source_id;
    for (double v : r.values) out << "," << num(v);
    out << "\n";
  }
}

CosineSummary instruction_similarity(std::span<const InstructionRow> rows) {
  std::vector<double> norms;
  for (const auto& r : rows) {
    double n = 0.0;
    for (double v : r.values) n += v * v;
    norms.push_back(std::sqrt(n));
  }
  double intra = 0.0, inter = 0.0;
  std::int64_t n_intra = 0, n_inter = 0;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows[a].values.size(); ++i) dot += rows[a].values[i] * rows[b].values[i];
      const double denom = norms[a] * norms[b];
      const double c = denom > 0.0 ? dot / denom : 0.0;
      if (rows[a].task == rows[b].task) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  }
  return {n_intra ? intra / static_cast<double>(n_intra) : 0.0, n_inter ? inter / static_cast<double>(n_inter) : 0.0};
}

}  // namespace amir
