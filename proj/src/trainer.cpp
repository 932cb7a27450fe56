#include "hicl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace hicl {

void TrainSchedule::validate() const {
  if (epochs_phase1 == 0) throw ConfigError("epochs_phase1 must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (replay_batch_size == 0) throw ConfigError("replay_batch_size must be positive");
  if (!(adam.lr > 0.0) || !(phase2_lr > 0.0)) throw ConfigError("learning rates must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
}

bool TrainSchedule::operator==(const TrainSchedule& o) const {
  return epochs_phase1 == o.epochs_phase1 && epochs_phase2 == o.epochs_phase2 && batch_size == o.batch_size &&
         replay_batch_size == o.replay_batch_size && fisher_samples == o.fisher_samples && adam.lr == o.adam.lr &&
         adam.beta1 == o.adam.beta1 && adam.beta2 == o.adam.beta2 && adam.eps == o.adam.eps && phase2_lr == o.phase2_lr &&
         phase2_current == o.phase2_current && phase2_replay == o.phase2_replay;
}

void TrainerConfig::validate() const {
  model.validate();
  weights.validate();
  schedule.validate();
  if (!(alpha_per >= 0.0)) throw ConfigError("alpha_per must be >= 0");
}

nlohmann::json StepRecord::to_json() const {
  return nlohmann::json{{"step", step},       {"task", task},         {"phase", phase},       {"cls", cls},
                        {"intra", intra},     {"replay", replay},     {"distill", distill},   {"ewc", ewc},
                        {"sparsity", sparsity}, {"contrastive", contrastive}, {"total", total}};
}

ContinualTrainer::ContinualTrainer(HiclModel& model, TrainerConfig config)
    : model_(model),
      config_(std::move(config)),
      buffer_(config_.buffer_per_task, config_.alpha_per, config_.seed),
      sampling_(make_rng(config_.seed, "sampling")) {
  config_.validate();
  if (!(model_.config() == config_.model)) throw ConfigError("trainer config does not describe the given model");
}

std::vector<std::size_t> ContinualTrainer::shuffled(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), sampling_);
  return order;
}

Tensor ContinualTrainer::fetch(const TaskData& task, std::size_t task_id, std::span<const std::size_t> rows) {
  if (audit_) audit_(task_id, task.task_id);
  return task.train.inputs.gather_rows(rows);
}

void ContinualTrainer::emit(const StepRecord& record) {
  if (log_ != nullptr) *log_ << record.to_json().dump() << '\n';
}

namespace {

double value_or_zero(const Var& v) { return v.valid() ? v.value().item() : 0.0; }

Tensor stack_inputs(const std::vector<ReplayItem>& items, std::size_t dim) {
  Tensor x(Shape{items.size(), dim});
  for (std::size_t r = 0; r < items.size(); ++r) std::copy(items[r].input.begin(), items[r].input.end(), x.row(r).begin());
  return x;
}

}  // namespace

void ContinualTrainer::train_task(const TaskData& task, std::size_t task_id) {
  if (task_id != tasks_seen_) {
    throw ProtocolError("tasks must arrive in order: expected task " + std::to_string(tasks_seen_) + ", got " +
                        std::to_string(task_id));
  }
  if (task.train.size() == 0) throw DataError("task " + std::to_string(task_id) + " has no training data");
  if (task.train.inputs.cols() != model_.config().encoder.input_dim) {
    throw DimensionError("task inputs have width " + std::to_string(task.train.inputs.cols()) + ", model expects " +
                         std::to_string(model_.config().encoder.input_dim));
  }
  std::vector<double> final_losses(task.train.size(), 0.0);
  phase1(task, task_id, final_losses);
  phase2(task, task_id);

  if (audit_) audit_(task_id, task.task_id);
  fisher_.push_back(estimate_fisher(model_, task.train, task_id, config_.schedule.fisher_samples));
  snapshot_ = model_.backbone;
  buffer_.populate(task.train, task_id, final_losses);
  ++tasks_seen_;
}

void ContinualTrainer::phase1(const TaskData& task, std::size_t task_id, std::vector<double>& final_losses) {
  const LossWeights& w = config_.weights;
  const TrainSchedule& s = config_.schedule;
  const std::size_t expert = model_.expert_for_task(task_id);
  const std::size_t n = task.train.size();
  const double rho = model_.config().encoder.sparsity_rho;
  const bool use_replay = w.alpha_rep > 0.0 || w.lambda4 > 0.0;
  const bool use_ewc = w.alpha_ewc > 0.0 || w.lambda3 > 0.0;

  model_.unfreeze_all();
  auto named = model_.named_parameters();
  Adam adam(model_.parameters(), s.adam);
  Prototype& proto = model_.prototypes[expert];

  for (std::size_t epoch = 0; epoch < s.epochs_phase1; ++epoch) {
    const bool last_epoch = epoch + 1 == s.epochs_phase1;
    const auto order = shuffled(n);
    for (std::size_t start = 0; start < n; start += s.batch_size) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(s.batch_size, n - start));
      const Tensor x = fetch(task, task_id, rows);
      std::vector<std::size_t> labels;
      for (std::size_t r : rows) labels.push_back(task.train.labels[r]);

      adam.zero_grad();
      Tape tape;
      const Var f = model_.features(tape, x);
      const ExpertForward out = model_.forward_expert(tape, f, expert);
      const Var ce = cross_entropy_rows(out.logits, labels);

      Phase1Terms terms;
      terms.cls = mean(ce);
      if (w.alpha_intra > 0.0) terms.intra = loss_intra(out.dg.code, labels, w.lambda_push, w.m_intra, w.intra_pair_mean);
      std::vector<ReplaySlot> slots;
      PerSampleLoss replay;
      if (use_replay && !buffer_.empty()) {
        slots = buffer_.sample(s.replay_batch_size);
        replay = loss_replay(tape, model_, buffer_.gather(slots));
        terms.replay = replay.loss;
      }
      if (w.alpha_dist > 0.0 && snapshot_) {
        Tape frozen(false);
        terms.distill = loss_distill(f, snapshot_->features(frozen, frozen.constant(x)).value());
      }
      if (use_ewc && !fisher_.empty()) {
        std::vector<double> task_weights;
        for (const FisherInfo& info : fisher_) {
          task_weights.push_back(ewc_task_weight(proto, model_.prototypes[model_.expert_for_task(info.task_id)], w.ewc_floor));
        }
        terms.ewc = loss_ewc(tape, named, fisher_, task_weights);
      }
      if (w.alpha_s > 0.0) terms.sparsity = loss_sparsity(out.dg.z, rho, w.sparsity_temperature);

      const Var phase1_loss = compose_phase1(w, terms);
      const Var total = compose_full(w, phase1_loss, Var{}, w.lambda3 > 0.0 ? terms.ewc : Var{},
                                     w.lambda4 > 0.0 ? terms.replay : Var{});
      tape.backward(total);
      adam.step();

      if (!slots.empty()) buffer_.update_priorities(slots, replay.per_sample);

      // One EMA update per step with the batch-mean code, taken before the step.
      const Tensor& codes = out.dg.code.value();
      std::vector<double> mean_code(codes.cols(), 0.0);
      for (std::size_t r = 0; r < codes.rows(); ++r) {
        for (std::size_t c = 0; c < codes.cols(); ++c) mean_code[c] += codes.at(r, c);
      }
      for (double& v : mean_code) v /= static_cast<double>(codes.rows());
      update_prototype(proto, mean_code);

      if (last_epoch) {
        for (std::size_t m = 0; m < rows.size(); ++m) final_losses[rows[m]] = ce.value()[m];
      }
      emit(StepRecord{step_++, task_id, 1, terms.cls.value().item(), value_or_zero(terms.intra),
                      value_or_zero(terms.replay), value_or_zero(terms.distill), value_or_zero(terms.ewc),
                      value_or_zero(terms.sparsity), 0.0, total.value().item()});
    }
  }
}

void ContinualTrainer::phase2(const TaskData& task, std::size_t task_id) {
  const LossWeights& w = config_.weights;
  const TrainSchedule& s = config_.schedule;
  if (s.epochs_phase2 == 0 || w.alpha_contrastive * w.lambda2 == 0.0) return;
  if (!s.phase2_current && !s.phase2_replay) return;

  const std::size_t expert = model_.expert_for_task(task_id);
  const std::size_t n = task.train.size();
  const std::size_t dim = model_.config().encoder.input_dim;

  model_.freeze_non_dg();
  AdamConfig adam_config = s.adam;
  adam_config.lr = s.phase2_lr;
  Adam adam(model_.parameters(), adam_config);
  for (std::size_t epoch = 0; epoch < s.epochs_phase2; ++epoch) {
    const auto order = shuffled(n);
    for (std::size_t start = 0; start < n; start += s.batch_size) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(s.batch_size, n - start));
      Tensor x(Shape{0, dim});
      std::vector<std::size_t> targets;
      std::vector<double> stacked;
      if (s.phase2_current) {
        const Tensor cur = fetch(task, task_id, rows);
        stacked.assign(cur.data().begin(), cur.data().end());
        targets.assign(rows.size(), expert);
      }
      if (s.phase2_replay && !buffer_.empty()) {
        const auto items = buffer_.gather(buffer_.sample(s.replay_batch_size));
        const Tensor rep = stack_inputs(items, dim);
        stacked.insert(stacked.end(), rep.data().begin(), rep.data().end());
        for (const ReplayItem& item : items) targets.push_back(model_.expert_for_task(item.task_id));
      }
      if (targets.empty()) continue;
      x = Tensor(Shape{targets.size(), dim}, std::move(stacked));

      adam.zero_grad();
      Tape tape;
      const Var f = model_.features(tape, x);
      std::vector<Var> codes;
      for (const Expert& e : model_.experts) codes.push_back(e.encode(tape, f).code);
      const PerSampleLoss c = loss_contrastive(codes, targets, model_.prototypes, w.m_contrastive, w.phase2_cross_form);
      const Var total = compose_full(w, Var{}, compose_phase2(w, c.loss), Var{}, Var{});
      tape.backward(total);
      adam.step();
      emit(StepRecord{step_++, task_id, 2, 0, 0, 0, 0, 0, 0, c.loss.value().item(), total.value().item()});
    }
  }
  model_.unfreeze_all();
}

namespace {

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

double task_il_accuracy(const HiclModel& model, const TaskData& task) {
  const LabeledData& test = task.test;
  if (test.size() == 0) return 0.0;
  const Tensor logits = model.expert_logits(test.inputs, model.expert_for_task(task.task_id));
  std::size_t hits = 0;
  for (std::size_t r = 0; r < test.size(); ++r) hits += argmax_row(logits.row(r)) == test.labels[r];
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

std::vector<std::size_t> predict_global(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen,
                                        const Tensor& inputs, GateMode mode) {
  if (tasks_seen == 0 || tasks_seen > stream.tasks.size()) throw ProtocolError("predict_global: no seen tasks");
  // Expert -> most recent seen task it was trained on.
  std::map<std::size_t, std::size_t> owner;
  std::size_t num_classes = 0;
  for (std::size_t t = 0; t < tasks_seen; ++t) {
    owner[model.expert_for_task(t)] = t;
    for (std::size_t c : stream.tasks[t].classes) num_classes = std::max(num_classes, c + 1);
  }
  const auto gates = model.route(inputs, mode);
  const std::size_t rows = inputs.rows();
  Tensor scores(Shape{rows, num_classes});
  for (std::size_t e = 0; e < model.num_experts(); ++e) {
    std::vector<std::size_t> members;
    for (std::size_t r = 0; r < rows; ++r) {
      if (gates[r].weights[e] > 0.0) members.push_back(r);
    }
    if (members.empty()) continue;
    const auto it = owner.find(e);
    if (it == owner.end()) throw RoutingError("routed to expert " + std::to_string(e) + " that owns no seen task");
    const TaskData& task = stream.tasks[it->second];
    const Tensor logits = model.expert_logits(inputs.gather_rows(members), e);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto row = logits.row(m);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      const double alpha = gates[members[m]].weights[e];
      for (std::size_t c = 0; c < row.size(); ++c) {
        scores.at(members[m], task.global_label(c)) += alpha * std::exp(row[c] - mx) / z;
      }
    }
  }
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = argmax_row(scores.row(r));
  return out;
}

double class_il_accuracy(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen, GateMode mode) {
  std::size_t hits = 0, total = 0;
  for (std::size_t t = 0; t < tasks_seen; ++t) {
    const TaskData& task = stream.tasks[t];
    if (task.test.size() == 0) continue;
    const auto pred = predict_global(model, stream, tasks_seen, task.test.inputs, mode);
    for (std::size_t r = 0; r < pred.size(); ++r) hits += pred[r] == task.global_label(task.test.labels[r]);
    total += pred.size();
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

nlohmann::json EvalRecord::to_json() const {
  return nlohmann::json{{"event", "eval"},
                        {"after_task", after_task},
                        {"task_il", task_il},
                        {"task_il_mean", task_il_mean},
                        {"class_il", class_il},
                        {"routing_accuracy", routing_accuracy}};
}

EvalRecord evaluate(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen, GateMode mode) {
  EvalRecord rec;
  rec.after_task = tasks_seen - 1;
  for (std::size_t t = 0; t < tasks_seen; ++t) rec.task_il.push_back(task_il_accuracy(model, stream.tasks[t]));
  rec.task_il_mean = std::accumulate(rec.task_il.begin(), rec.task_il.end(), 0.0) / static_cast<double>(tasks_seen);
  rec.class_il = class_il_accuracy(model, stream, tasks_seen, mode);
  rec.routing_accuracy = routing_accuracy(model, stream, tasks_seen);
  return rec;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json history_json = nlohmann::json::array();
  for (const EvalRecord& r : history) history_json.push_back(r.to_json());
  return nlohmann::json{{"task_il", task_il},
                        {"class_il", class_il},
                        {"routing_accuracy", routing_accuracy},
                        {"final_task_il", final_task_il},
                        {"forgetting", forgetting},
                        {"mean_forgetting", mean_forgetting},
                        {"flops", flops.to_json()},
                        {"history", history_json}};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "task_il,class_il,routing_accuracy,mean_forgetting,conditional_mflops,dense_mflops\n";
  out << task_il << ',' << class_il << ',' << routing_accuracy << ',' << mean_forgetting << ','
      << static_cast<double>(flops.conditional_total()) / 1e6 << ',' << static_cast<double>(flops.dense_total()) / 1e6
      << '\n';
  return out.str();
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

MetricsReport summarize(std::vector<EvalRecord> history, const ModelConfig& model) {
  MetricsReport rep;
  rep.history = std::move(history);
  rep.flops = count_flops(model);
  if (rep.history.empty()) return rep;
  const EvalRecord& last = rep.history.back();
  rep.final_task_il = last.task_il;
  rep.task_il = last.task_il_mean;
  rep.class_il = last.class_il;
  rep.routing_accuracy = last.routing_accuracy;
  const std::size_t tasks = last.task_il.size();
  rep.forgetting.assign(tasks, 0.0);
  for (std::size_t t = 0; t < tasks; ++t) {
    double best = 0.0;
    for (const EvalRecord& r : rep.history) {
      if (t < r.task_il.size()) best = std::max(best, r.task_il[t]);
    }
    rep.forgetting[t] = best - last.task_il[t];
  }
  if (tasks > 1) {
    rep.mean_forgetting =
        std::accumulate(rep.forgetting.begin(), rep.forgetting.end() - 1, 0.0) / static_cast<double>(tasks - 1);
  }
  return rep;
}

}  // namespace

RunResult run_stream(const TrainerConfig& config, const TaskStream& stream, const RunOutputs& outputs) {
  config.validate();
  stream.validate();
  if (stream.tasks.empty()) throw DataError("task stream is empty");
  if (stream.input_dim() != config.model.encoder.input_dim) {
    throw ConfigError("data has input width " + std::to_string(stream.input_dim()) + ", model input_dim is " +
                      std::to_string(config.model.encoder.input_dim));
  }
  if (stream.classes_per_task() != config.model.encoder.num_classes) {
    throw ConfigError("data has " + std::to_string(stream.classes_per_task()) + " classes per task, model num_classes is " +
                      std::to_string(config.model.encoder.num_classes));
  }

  RunResult result{MetricsReport{}, HiclModel(config.model, config.seed)};
  std::ofstream metrics, log;
  const bool write = !outputs.dir.empty();
  if (write) {
    std::filesystem::create_directories(outputs.dir / "checkpoints");
    metrics = open_output(outputs.dir / "metrics.jsonl");
    log = open_output(outputs.dir / "train_log.jsonl");
  }

  std::vector<EvalRecord> history;
  {
    ContinualTrainer trainer(result.model, config);
    if (write) trainer.set_log(&log);
    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
      trainer.train_task(stream.tasks[t], t);
      history.push_back(evaluate(result.model, stream, t + 1, config.gate_mode));
      if (write) {
        metrics << history.back().to_json().dump() << '\n';
        const nlohmann::json meta{{"task", t}, {"steps", trainer.steps()}, {"seed", config.seed}};
        save_checkpoint(outputs.dir / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt"),
                        result.model.to_checkpoint(meta));
      }
    }
  }
  result.report = summarize(std::move(history), config.model);
  if (write) {
    open_output(outputs.dir / "report.json") << result.report.to_json().dump(2) << '\n';
    open_output(outputs.dir / "report.csv") << result.report.to_csv();
  }
  return result;
}

}  // namespace hicl
