#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hicl/error.hpp"
#include "hicl/trainer.hpp"
#include "support.hpp"

using namespace hicl;
using hicl::test::random_tensor;

namespace {

LabeledData rows(std::size_t n) {
  LabeledData d{Tensor(Shape{n, 1}), std::vector<std::size_t>(n, 0)};
  for (std::size_t i = 0; i < n; ++i) d.inputs[i] = static_cast<double>(i);
  return d;
}

/// Pearson statistic of observed counts against a uniform expectation.
double chi_square(const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  const double expected = total / static_cast<double>(counts.size());
  double chi = 0.0;
  for (double c : counts) chi += (c - expected) * (c - expected) / expected;
  return chi;
}

// Upper 1% point of chi-square with 19 degrees of freedom.
constexpr double kChi19 = 36.191;

SyntheticSpec small_stream(std::size_t tasks, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_tasks = tasks;
  s.dim = 16;
  s.separation = 10.0;
  s.train_per_class = 60;
  s.test_per_class = 40;
  s.seed = seed;
  return s;
}

TrainerConfig small_trainer(std::size_t experts, std::size_t input_dim) {
  TrainerConfig c;
  c.model.num_experts = experts;
  EncoderConfig& e = c.model.encoder;
  e.input_dim = input_dim;
  e.backbone_widths = {32};
  e.grid_units = 2;
  e.grid_dim = 8;
  e.grid_scale = 10.0;
  e.dg_dim = 128;
  e.ca3_widths = {32, 16};
  e.ca1_widths = {32, 16, 8};
  e.num_classes = 2;
  c.schedule.epochs_phase1 = 5;
  c.schedule.epochs_phase2 = 2;
  c.schedule.fisher_samples = 50;
  c.buffer_per_task = 40;
  c.weights.alpha_ewc = 1.0;
  c.weights.alpha_intra = 0.0;
  return c;
}

TrainerConfig fine_tune(TrainerConfig c) {
  c.model.num_experts = 1;
  c.weights.alpha_rep = c.weights.alpha_dist = c.weights.alpha_ewc = c.weights.alpha_contrastive = 0.0;
  return c;
}

std::uint64_t hash_parameters(const HiclModel& model, bool dg) {
  std::uint64_t h = 1469598103934665603ULL;
  model.visit_parameters([&](const std::string& name, const Parameter& p) {
    const bool is_dg = name.find(".dg.") != std::string::npos || name.find(".dg_norm.") != std::string::npos;
    if (is_dg != dg) return;
    for (double v : p.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 1099511628211ULL;
    }
  });
  return h;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_SUITE("continual-trainer") {
  TEST_CASE("equal priorities sample uniformly") {
    ReplayBuffer buffer(20, 0.6, 1);
    buffer.populate(rows(20), 0, std::vector<double>(20, 0.3));
    std::vector<double> counts(20, 0.0);
    for (int i = 0; i < 10000; ++i) counts[buffer.sample(1)[0].index] += 1;
    CHECK(chi_square(counts) < kChi19);
  }

  TEST_CASE("zero exponent ignores priorities") {
    ReplayBuffer buffer(20, 0.0, 2);
    std::vector<double> losses(20);
    for (std::size_t i = 0; i < 20; ++i) losses[i] = std::pow(10.0, static_cast<double>(i % 5));
    buffer.populate(rows(20), 0, losses);
    CHECK(buffer.probability({0, 0}) == doctest::Approx(0.05).epsilon(1e-15));
    std::vector<double> counts(20, 0.0);
    for (int i = 0; i < 10000; ++i) counts[buffer.sample(1)[0].index] += 1;
    CHECK(chi_square(counts) < kChi19);
  }

  TEST_CASE("a dominant priority is sampled almost always") {
    ReplayBuffer buffer(50, 0.6, 3);
    std::vector<double> losses(50, 0.0);
    losses[17] = 1e6;
    buffer.populate(rows(50), 0, losses);
    std::size_t hits = 0;
    const int batches = 2000;
    for (int i = 0; i < batches; ++i) {
      for (const ReplaySlot& s : buffer.sample(1)) hits += s.index == 17;
    }
    CHECK(static_cast<double>(hits) / batches > 0.99);
  }

  TEST_CASE("sampling probabilities follow priority to the exponent") {
    ReplayBuffer buffer(4, 0.5, 4);
    buffer.populate(rows(4), 0, std::vector<double>{1 - 1e-3, 4 - 1e-3, 9 - 1e-3, 16 - 1e-3});
    const double total = 1 + 2 + 3 + 4;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(buffer.probability({0, i}) == doctest::Approx((i + 1) / total).epsilon(1e-12));
    }
    std::vector<double> counts(4, 0.0);
    const int draws = 40000;
    for (int i = 0; i < draws; ++i) counts[buffer.sample(1)[0].index] += 1;
    for (std::size_t i = 0; i < 4; ++i) {
      const double p = (i + 1) / total;
      CHECK(std::fabs(counts[i] / draws - p) <= 3.0 * std::sqrt(p * (1 - p) / draws));
    }
  }

  TEST_CASE("batches are distinct and oversized requests return everything") {
    ReplayBuffer buffer(10, 0.6, 5);
    buffer.populate(rows(10), 0, std::vector<double>(10, 1.0));
    buffer.populate(rows(3), 1, std::vector<double>(3, 1.0));
    const auto batch = buffer.sample(8);
    CHECK(batch.size() == 8);
    for (std::size_t i = 1; i < batch.size(); ++i) CHECK(!(batch[i] == batch[i - 1]));
    CHECK(buffer.sample(100).size() == 13);
  }

  TEST_CASE("priorities are updated from replay losses") {
    ReplayBuffer buffer(5, 0.6, 6);
    buffer.populate(rows(5), 0, std::vector<double>(5, 1.0));
    const std::vector<ReplaySlot> slots{{0, 1}, {0, 3}};
    buffer.update_priorities(slots, std::vector<double>{-2.0, 0.0});
    CHECK(buffer.at({0, 1}).priority == doctest::Approx(2.001));
    CHECK(buffer.at({0, 1}).last_loss == -2.0);
    CHECK(buffer.at({0, 3}).priority == ReplayBuffer::kPriorityFloor);
    for (const ReplayItem& item : buffer.items(0)) CHECK(item.priority > 0.0);
  }

  TEST_CASE("buffer population counts") {
    ReplayBuffer buffer(200, 0.6, 7);
    buffer.populate(rows(10000), 0, std::vector<double>(10000, 0.5));
    CHECK(buffer.items(0).size() == 200);
    CHECK(buffer.items(0).front().priority == doctest::Approx(0.501));
    buffer.populate(rows(50), 1, std::vector<double>(50, 0.5));
    CHECK(buffer.items(1).size() == 50);
    CHECK(buffer.size() == 250);
    CHECK_THROWS_AS(buffer.populate(rows(5), 3, std::vector<double>(5, 0.0)), ProtocolError);
  }

  TEST_CASE("reservoir inclusion is uniform") {
    const std::size_t n = 50, b = 10, seeds = 1000;
    std::vector<double> counts(n, 0.0);
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(s, "reservoir"));
      const auto kept = reservoir_sample(n, b, rng);
      REQUIRE(kept.size() == b);
      for (std::size_t i : kept) counts[i] += 1;
    }
    const double p = static_cast<double>(b) / n;
    const double sigma = std::sqrt(seeds * p * (1 - p));
    for (std::size_t i = 0; i < n; ++i) {
      CAPTURE(i);
      CHECK(std::fabs(counts[i] - seeds * p) <= 3.0 * sigma);
    }
  }

  TEST_CASE("tasks must arrive in order") {
    const TaskStream stream = make_synthetic_stream(small_stream(2, 0));
    TrainerConfig c = small_trainer(2, 16);
    c.schedule.epochs_phase1 = 1;
    HiclModel model(c.model, 0);
    ContinualTrainer trainer(model, c);
    CHECK_THROWS_AS(trainer.train_task(stream.tasks[1], 1), ProtocolError);
    trainer.train_task(stream.tasks[0], 0);
    CHECK_THROWS_AS(trainer.train_task(stream.tasks[0], 0), ProtocolError);
  }

  TEST_CASE("bookkeeping, audit, freeze and anchors over two tasks") {
    const TaskStream stream = make_synthetic_stream(small_stream(2, 1));
    TrainerConfig c = small_trainer(2, 16);
    c.schedule.batch_size = 32;
    HiclModel model(c.model, 1);
    ContinualTrainer trainer(model, c);
    std::size_t audits = 0;
    trainer.set_audit([&audits](std::size_t training, std::size_t read) {
      ++audits;
      REQUIRE(training == read);
    });
    trainer.train_task(stream.tasks[0], 0);
    CHECK(audits > 0);

    const std::size_t n = stream.tasks[0].train.size();
    const std::size_t steps_per_epoch = (n + 31) / 32;
    CHECK(model.prototypes[0].update_count == steps_per_epoch * c.schedule.epochs_phase1);
    CHECK(model.prototypes[1].cold());
    CHECK(trainer.steps() == steps_per_epoch * (c.schedule.epochs_phase1 + c.schedule.epochs_phase2));
    CHECK(trainer.buffer().items(0).size() == c.buffer_per_task);
    REQUIRE(trainer.snapshot().has_value());

    const FisherInfo anchors = trainer.fisher()[0];
    trainer.train_task(stream.tasks[1], 1);
    CHECK(trainer.tasks_seen() == 2);
    REQUIRE(trainer.fisher().size() == 2);
    REQUIRE(trainer.fisher()[0].entries.size() == anchors.entries.size());
    for (std::size_t i = 0; i < anchors.entries.size(); ++i) {
      CHECK(trainer.fisher()[0].entries[i].fisher == anchors.entries[i].fisher);
      CHECK(trainer.fisher()[0].entries[i].anchor == anchors.entries[i].anchor);
    }
  }

  TEST_CASE("phase two leaves non-separation parameters untouched") {
    const TaskStream stream = make_synthetic_stream(small_stream(1, 2));
    TrainerConfig with = small_trainer(2, 16);
    TrainerConfig without = with;
    without.schedule.epochs_phase2 = 0;
    HiclModel a(with.model, 2), b(without.model, 2);
    ContinualTrainer(a, with).train_task(stream.tasks[0], 0);
    ContinualTrainer(b, without).train_task(stream.tasks[0], 0);
    CHECK(hash_parameters(a, false) == hash_parameters(b, false));
    CHECK(hash_parameters(a, true) != hash_parameters(b, true));
    CHECK(a.prototypes[0].vector == b.prototypes[0].vector);
  }

  TEST_CASE("training log has one record per step") {
    const TaskStream stream = make_synthetic_stream(small_stream(1, 3));
    TrainerConfig c = small_trainer(1, 16);
    c.schedule.epochs_phase1 = 2;
    HiclModel model(c.model, 3);
    ContinualTrainer trainer(model, c);
    std::ostringstream log;
    trainer.set_log(&log);
    trainer.train_task(stream.tasks[0], 0);
    std::istringstream in(log.str());
    std::string line;
    std::size_t count = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("step").get<std::size_t>() == count);
      for (const char* key : {"task", "phase", "cls", "intra", "replay", "distill", "ewc", "sparsity", "contrastive",
                              "total"}) {
        CHECK(j.contains(key));
      }
      ++count;
    }
    CHECK(count == trainer.steps());
  }

  TEST_CASE("single-task stream: task-IL equals class-IL") {
    const TaskStream stream = make_synthetic_stream(small_stream(1, 4));
    const RunResult r = run_stream(small_trainer(2, 16), stream);
    CHECK(r.report.task_il == r.report.class_il);
    CHECK(r.report.routing_accuracy == 1.0);
    CHECK(r.report.forgetting == std::vector<double>{0.0});
  }

  TEST_CASE("two tasks: the full method retains the first, fine-tuning does not") {
    const TaskStream stream = make_synthetic_stream(small_stream(2, 0));
    TrainerConfig c = small_trainer(2, 16);
    c.schedule.epochs_phase1 = 10;
    c.schedule.adam.lr = 3e-3;
    const RunResult full = run_stream(c, stream);
    const RunResult naive = run_stream(fine_tune(c), stream);
    CAPTURE(full.report.final_task_il[0]);
    CAPTURE(naive.report.final_task_il[0]);
    CHECK(full.report.final_task_il[0] >= 0.9);
    CHECK(naive.report.final_task_il[0] < 0.7);
  }

  TEST_CASE("runs are deterministic") {
    const TaskStream stream = make_synthetic_stream(small_stream(2, 6));
    TrainerConfig c = small_trainer(2, 16);
    c.schedule.epochs_phase1 = 2;
    const auto root = std::filesystem::temp_directory_path() / "hicl_determinism";
    std::filesystem::remove_all(root);
    run_stream(c, stream, RunOutputs{root / "a"});
    run_stream(c, stream, RunOutputs{root / "b"});
    for (const char* file : {"metrics.jsonl", "train_log.jsonl", "report.json", "report.csv",
                             "checkpoints/task_0.ckpt", "checkpoints/task_1.ckpt"}) {
      CAPTURE(file);
      const std::string a = slurp(root / "a" / file);
      CHECK(!a.empty());
      CHECK(a == slurp(root / "b" / file));
    }
    std::filesystem::remove_all(root);
  }

  TEST_CASE("soft and hard gating agree on confident inputs") {
    const TaskStream stream = make_synthetic_stream(small_stream(3, 7));
    const RunResult r = run_stream(small_trainer(3, 16), stream);
    std::size_t confident = 0, agree = 0;
    for (const TaskData& task : stream.tasks) {
      const MoeOutput soft = r.model.moe_forward(task.test.inputs, GateMode::soft, false);
      const MoeOutput hard = r.model.moe_forward(task.test.inputs, GateMode::hard, false);
      for (std::size_t i = 0; i < task.test.size(); ++i) {
        const auto& w = soft.gates[i].weights;
        if (*std::max_element(w.begin(), w.end()) <= 0.5) continue;
        ++confident;
        const auto s = soft.logits.row(i), h = hard.logits.row(i);
        agree += std::max_element(s.begin(), s.end()) - s.begin() == std::max_element(h.begin(), h.end()) - h.begin();
      }
    }
    CAPTURE(confident);
    REQUIRE(confident > 0);
    CHECK(static_cast<double>(agree) / confident >= 0.95);
  }

  TEST_CASE("trainer config validation") {
    TrainerConfig c = small_trainer(2, 16);
    CHECK_NOTHROW(c.validate());
    c.schedule.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}
