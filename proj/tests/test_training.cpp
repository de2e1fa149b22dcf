#include "test_support.hpp"

#include <filesystem>
#include <fstream>

#include "amir/checkpoint.hpp"
#include "amir/errors.hpp"
#include "amir/training.hpp"

using namespace amir;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c = RunConfig::desk_scale();
  c.model.channels = 8;
  c.train.batch_size = 2;
  c.train.iterations = 6;
  c.train.validate_every = 3;
  c.data.synthetic_count = 12;
  c.data.synthetic_size = 32;
  return c;
}

std::shared_ptr<const Corpus> corpus_for(const RunConfig& c) {
  return std::make_shared<const Corpus>(c.data.corpus_manifest("."));
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("amir_train_" + name);
  fs::remove_all(p);
  return p;
}

bool same_parameters(AmirModel& a, AmirModel& b) {
  auto pa = a->named_parameters();
  auto pb = b->named_parameters();
  for (const auto& item : pa) {
    if (!torch::equal(item.value(), pb[item.key()])) return false;
  }
  return pa.size() == pb.size();
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("total loss vanishes for a perfect prediction with balanced gates") {
    auto x = torch::rand({2, 1, 8, 8});
    std::vector<GateDecision> g = {{torch::full({10, 4}, 0.25f), torch::zeros({10, 2}, torch::kLong)}};
    CHECK(total_loss(x, x, g, 0.01).total.item<float>() == 0.0f);
  }

  TEST_CASE("total loss closed forms") {
    auto t = torch::rand({1, 1, 8, 8}, torch::kFloat64);
    CHECK(total_loss(t + 0.1, t, {}, 0.0).total.item<double>() == doctest::Approx(0.1).epsilon(1e-12));
    // importance (1.5, 0.5, 1.5, 0.5): mean 1, variance 0.25
    std::vector<GateDecision> g = {{torch::tensor({{1.5, 0.5, 1.5, 0.5}}, torch::kFloat64), torch::zeros({1, 2}, torch::kLong)}};
    const auto terms = total_loss(t + 0.1, t, g, 0.01);
    CHECK(terms.balance.item<double>() == doctest::Approx(0.25));
    CHECK(std::abs(terms.total.item<double>() - 0.1025) < 1e-12);
    CHECK_THROWS_AS(total_loss(t, torch::rand({1, 1, 8, 4}), {}, 0.0), Error);
  }

  TEST_CASE("balance term averages the routers") {
    std::vector<GateDecision> g = {{torch::tensor({{0.5f, 0.5f, 0.0f, 0.0f}}), torch::zeros({1, 2}, torch::kLong)},
                                   {torch::full({1, 4}, 0.25f), torch::zeros({1, 2}, torch::kLong)}};
    CHECK(routing_balance(g).item<float>() == doctest::Approx(0.5));
  }

  TEST_CASE("cosine learning-rate schedule") {
    TrainConfig tc;
    CHECK(lr_at(0, tc) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lr_at(tc.iterations, tc) == doctest::Approx(1e-6).epsilon(1e-12));
    CHECK(std::abs(lr_at(tc.iterations / 2, tc) - 1.005e-4) < 1e-15);
    CHECK(lr_at(1000, tc) > lr_at(1001, tc));
    try {
      lr_at(tc.iterations + 1, tc);
      FAIL("expected a parameter error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Parameter);
    }
    CHECK_THROWS_AS(lr_at(-1, tc), Error);
  }

  TEST_CASE("task draws are uniform and deterministic") {
    const std::vector<TaskId> tasks = {kSuperResolution, kDenoising, kSynthesis};
    std::array<int, 3> counts{};
    for (int i = 0; i < 30000; ++i) ++counts[static_cast<std::size_t>(draw_task(tasks, i, 12).value)];
    double chi = 0;
    for (int c : counts) {
      CHECK(std::abs(c / 30000.0 - 1.0 / 3.0) < 0.02 / 3.0);
      chi += (c - 10000.0) * (c - 10000.0) / 10000.0;
    }
    CHECK(chi < 13.8);  // 2 degrees of freedom, 0.1%
    const std::vector<TaskId> one = {kSynthesis};
    for (int i = 0; i < 50; ++i) CHECK(draw_task(one, i, 1) == kSynthesis);
  }

  TEST_CASE("batches are single-task and reproducible") {
    const auto c = tiny_run();
    auto corpus = corpus_for(c);
    const std::vector<TaskId> tasks = {kSuperResolution, kDenoising, kSynthesis};
    for (int it = 0; it < 5; ++it) {
      auto a = sample_task_batch(*corpus, tasks, it, 4, 3, 32);
      auto b = sample_task_batch(*corpus, tasks, it, 4, 3, 32);
      CHECK(a.task == b.task);
      CHECK(a.source_ids == b.source_ids);
      CHECK(torch::equal(a.lq, b.lq));
      CHECK(a.lq.sizes() == torch::IntArrayRef{3, 1, 32, 32});
      for (const auto& id : a.source_ids) CHECK(id.find(corpus->registry().name(a.task)) != std::string::npos);
    }
  }

  TEST_CASE("a task without training sources is a data error") {
    auto m = CorpusManifest::synthetic(3, 32, 1);
    m.fractions = {1e-12, 0.5};
    Corpus corpus(m);
    const std::vector<TaskId> tasks = {kDenoising};
    try {
      sample_task_batch(corpus, tasks, 0, 0, 2, 32);
      FAIL("expected a data error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Data);
    }
  }

  TEST_CASE("identical seeds give identical metric logs") {
    const auto c = tiny_run();
    auto corpus = corpus_for(c);
    Trainer a(c, corpus), b(c, corpus);
    a.run();
    b.run();
    REQUIRE(a.log_rows().size() == 6);
    CHECK(a.log_rows() == b.log_rows());
    CHECK(a.log_rows()[0].find(",,,") != std::string::npos);
    CHECK(a.log_rows()[2].find(",,,") == std::string::npos);
    CHECK(a.log_header().rfind("iteration,lr,l1,balance,total,sr_val_psnr", 0) == 0);
  }

  TEST_CASE("checkpoint resume continues bit-identically") {
    const auto c = tiny_run();
    auto corpus = corpus_for(c);
    Trainer straight(c, corpus);
    straight.run(4);

    const auto dir = scratch("resume");
    Trainer first(c, corpus);
    first.run(3);
    first.save_checkpoint(dir / "ckpt");
    auto resumed = Trainer::resume(dir / "ckpt", corpus);
    CHECK(resumed->iteration() == 3);
    CHECK(same_parameters(first.model(), resumed->model()));
    resumed->step();
    CHECK(same_parameters(straight.model(), resumed->model()));
    CHECK(read_checkpoint_info(dir / "ckpt").config.model.channels == 8);
  }

  TEST_CASE("run writes metrics.csv, a final checkpoint and loads back") {
    auto c = tiny_run();
    c.train.checkpoint_every = 3;
    const auto dir = scratch("run");
    Trainer t(c, corpus_for(c), dir);
    t.run();
    CHECK(fs::exists(dir / "checkpoints" / "iter_00000003" / "manifest.json"));
    CHECK(fs::exists(dir / "checkpoint" / "manifest.json"));
    std::ifstream in(dir / "metrics.csv");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 7);
    auto m = load_model(dir / "checkpoint");
    CHECK(same_parameters(m, t.model()));
    CHECK_THROWS_AS(load_model(dir / "missing"), Error);
  }

  TEST_CASE("ablation variants train") {
    for (int variant = 0; variant < 4; ++variant) {
      auto c = tiny_run();
      c.model.enable_srm = variant != 0;
      c.model.enable_crm = variant != 1;
      c.model.use_dictionary = variant != 2;
      if (variant == 3) c.model.enable_srm = c.model.enable_crm = false;
      Trainer t(c, corpus_for(c));
      auto before = t.model()->parameters()[0].clone();
      for (int i = 0; i < 3; ++i) {
        const auto r = t.step();
        CHECK(std::isfinite(r.total));
        if (!c.model.enable_srm) CHECK(r.balance == 0.0);
      }
      CHECK_FALSE(torch::equal(before, t.model()->parameters()[0]));
    }
  }

  TEST_CASE("single-task training only sees that task") {
    auto c = tiny_run();
    c.train.tasks = {"denoise"};
    Trainer t(c, corpus_for(c));
    for (int i = 0; i < 3; ++i) CHECK(t.step().task == kDenoising);
  }

  TEST_CASE("a non-finite loss aborts with the batch id") {
    const auto c = tiny_run();
    const auto dir = scratch("nan");
    Trainer t(c, corpus_for(c), dir);
    {
      torch::NoGradGuard g;
      for (auto& item : t.model()->named_parameters()) {
        if (item.key().rfind("shallow", 0) == 0) item.value().fill_(NAN);
      }
    }
    try {
      t.step();
      FAIL("expected a numerical error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numerical);
      CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
    }
    CHECK(fs::exists(dir / "nonfinite_batch.json"));
  }

  TEST_CASE("evaluation covers every held-out image") {
    const auto c = tiny_run();
    auto corpus = corpus_for(c);
    Trainer t(c, corpus);
    const auto report = evaluate(t.model(), *corpus, t.tasks(), Split::Test, 0);
    for (auto task : t.tasks()) {
      CHECK(report.count(corpus->registry().name(task)) == corpus->sources(task, Split::Test).size());
    }
  }
}
