#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hicl/flops.hpp"
#include "hicl/objectives.hpp"
#include "hicl/optim.hpp"

namespace hicl {

struct TrainSchedule {
  std::size_t epochs_phase1 = 10;
  std::size_t epochs_phase2 = 2;
  std::size_t batch_size = 32;
  std::size_t replay_batch_size = 32;
  std::size_t fisher_samples = 200;
  AdamConfig adam;
  /// Learning rate of the DG-only consolidation phase.
  double phase2_lr = 1e-3;
  /// Sources of Phase II batches; both on means 1:1 current and replayed rows.
  bool phase2_current = true;
  bool phase2_replay = true;

  void validate() const;
  bool operator==(const TrainSchedule& o) const;
};

/// Everything a training run needs besides data.
struct TrainerConfig {
  ModelConfig model;
  LossWeights weights;
  TrainSchedule schedule;
  std::size_t buffer_per_task = 200;
  double alpha_per = 0.6;
  GateMode gate_mode = GateMode::hard;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Loss-term values of one optimization step, for the JSON-lines training log.
struct StepRecord {
  std::size_t step = 0;
  std::size_t task = 0;
  int phase = 1;
  double cls = 0, intra = 0, replay = 0, distill = 0, ewc = 0, sparsity = 0, contrastive = 0, total = 0;

  nlohmann::json to_json() const;
};

/// Runs the two-phase schedule task by task on one model.
class ContinualTrainer {
 public:
  /// Called with (training task, task whose raw data is read) on every raw batch fetch.
  using AuditHook = std::function<void(std::size_t, std::size_t)>;

  ContinualTrainer(HiclModel& model, TrainerConfig config);

  /// Phase I, Phase II, Fisher estimate, backbone snapshot, buffer population.
  /// task_id must equal tasks_seen().
  void train_task(const TaskData& task, std::size_t task_id);

  std::size_t tasks_seen() const noexcept { return tasks_seen_; }
  std::size_t steps() const noexcept { return step_; }
  const ReplayBuffer& buffer() const noexcept { return buffer_; }
  const std::vector<FisherInfo>& fisher() const noexcept { return fisher_; }
  const std::optional<Backbone>& snapshot() const noexcept { return snapshot_; }
  const TrainerConfig& config() const noexcept { return config_; }

  void set_log(std::ostream* log) { log_ = log; }
  void set_audit(AuditHook hook) { audit_ = std::move(hook); }

 private:
  void phase1(const TaskData& task, std::size_t task_id, std::vector<double>& final_losses);
  void phase2(const TaskData& task, std::size_t task_id);
  std::vector<std::size_t> shuffled(std::size_t n);
  Tensor fetch(const TaskData& task, std::size_t task_id, std::span<const std::size_t> rows);
  void emit(const StepRecord& record);

  HiclModel& model_;
  TrainerConfig config_;
  ReplayBuffer buffer_;
  std::vector<FisherInfo> fisher_;
  std::optional<Backbone> snapshot_;
  Rng sampling_;
  std::size_t tasks_seen_ = 0;
  std::size_t step_ = 0;
  std::ostream* log_ = nullptr;
  AuditHook audit_;
};

/// Accuracy with the ground-truth task's expert forced (task identity given).
double task_il_accuracy(const HiclModel& model, const TaskData& task);

/// Accuracy over the test splits of the first `tasks_seen` tasks without task
/// identity: routed expert -> most recent task it owns -> global class.
double class_il_accuracy(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen, GateMode mode);

/// Global class predictions for `inputs` given the tasks seen so far.
std::vector<std::size_t> predict_global(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen,
                                        const Tensor& inputs, GateMode mode);

struct EvalRecord {
  std::size_t after_task = 0;
  std::vector<double> task_il;  // one per seen task
  double task_il_mean = 0.0;
  double class_il = 0.0;
  double routing_accuracy = 0.0;

  nlohmann::json to_json() const;
};

EvalRecord evaluate(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen, GateMode mode);

struct MetricsReport {
  std::vector<EvalRecord> history;
  std::vector<double> final_task_il;
  double task_il = 0.0;
  double class_il = 0.0;
  double routing_accuracy = 0.0;
  /// Max-over-time accuracy minus final accuracy, per task.
  std::vector<double> forgetting;
  double mean_forgetting = 0.0;
  FlopsReport flops;

  nlohmann::json to_json() const;
  /// Header line plus one row: task_il,class_il,routing_accuracy,mean_forgetting,conditional_mflops,dense_mflops.
  std::string to_csv() const;
};

/// Where run_stream writes its artifacts; nothing is written when `dir` is empty.
///   metrics.jsonl       one evaluation record per task boundary
///   train_log.jsonl     one loss breakdown per optimization step
///   report.json, report.csv
///   checkpoints/task_<t>.ckpt
struct RunOutputs {
  std::filesystem::path dir;
};

struct RunResult {
  MetricsReport report;
  HiclModel model;
};

RunResult run_stream(const TrainerConfig& config, const TaskStream& stream, const RunOutputs& outputs = {});

}  // namespace hicl
