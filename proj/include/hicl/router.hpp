#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hicl/checkpoint.hpp"
#include "hicl/data.hpp"
#include "hicl/encoder.hpp"
#include "hicl/gradcheck.hpp"
#include "json.hpp"

namespace hicl {

enum class GateMode { soft, hard, top2, hybrid };

std::string to_string(GateMode mode);
GateMode parse_gate_mode(const std::string& name);

/// Per-expert running mean of DG codes; cold until the first update.
struct Prototype {
  std::size_t expert_id = 0;
  Tensor vector;
  std::size_t update_count = 0;
  double ema_rate = 0.01;

  bool cold() const noexcept { return update_count == 0; }
};

/// a·b / (|a| |b|), or 0 when either norm is below 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// u <- (1 - mu) u + mu code.
void update_prototype(Prototype& proto, std::span<const double> code);

struct GateDecision {
  std::vector<double> similarities;
  std::vector<double> weights;
  GateMode mode = GateMode::hard;
  std::vector<std::size_t> selected;  // experts with nonzero weight, ascending

  /// Expert with the largest weight (lowest id on ties).
  std::size_t top() const;
};

/// Turns per-expert similarities into mixing weights. Experts whose `eligible`
/// flag is false (cold prototypes) get weight 0 and are never selected.
GateDecision gate_from_similarities(std::span<const double> similarities, const std::vector<bool>& eligible,
                                    GateMode mode, double temperature);

/// s_i = cos(codes[i], prototypes[i].vector), then gate_from_similarities with
/// cold prototypes ineligible. Throws RoutingError when every prototype is cold.
GateDecision gate(const std::vector<DgCode>& codes, const std::vector<Prototype>& prototypes, GateMode mode,
                  double temperature);

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t num_experts = 5;
  double ema_rate = 0.01;
  double temperature = 0.1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct MoeOutput {
  Tensor logits;  // [rows x num_classes]
  std::vector<GateDecision> gates;
  /// Number of experts whose CA3/CA1/head ran, per input row.
  std::vector<std::size_t> executed_experts;
};

/// Shared backbone plus N hippocampal experts routed by prototype similarity.
class HiclModel {
 public:
  HiclModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t num_experts() const noexcept { return experts.size(); }
  /// Default task-to-expert mapping: task t trains expert t mod N.
  std::size_t expert_for_task(std::size_t task) const noexcept { return task % experts.size(); }

  Var features(Tape& tape, const Tensor& inputs) const;
  ExpertForward forward_expert(Tape& tape, const Var& features, std::size_t expert) const;

  /// Hard/soft/top-2/hybrid routing decision per input row. Every expert's DG runs.
  std::vector<GateDecision> route(const Tensor& inputs, GateMode mode) const;

  /// Routed prediction. With `conditional`, only the experts a row selects run
  /// their CA3/CA1/head; otherwise all experts run and are mixed by weight.
  MoeOutput moe_forward(const Tensor& inputs, GateMode mode, bool conditional) const;

  /// Logits of one expert, bypassing the gate (task-identity evaluation).
  Tensor expert_logits(const Tensor& inputs, std::size_t expert) const;
  std::vector<DgCode> dg_codes(const Tensor& inputs, std::size_t expert) const;

  template <typename F>
  void visit_parameters(F&& fn) {
    backbone.visit("backbone.", fn);
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i].visit("expert" + std::to_string(i) + ".", fn);
  }
  template <typename F>
  void visit_parameters(F&& fn) const {
    backbone.visit("backbone.", fn);
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i].visit("expert" + std::to_string(i) + ".", fn);
  }

  std::vector<NamedParameter> named_parameters();
  std::vector<Parameter*> parameters();

  /// Phase I: everything trainable.
  void unfreeze_all();
  /// Phase II: only the DG projections and DG LayerNorm affines stay trainable.
  void freeze_non_dg();

  /// Parameters and prototypes; the header carries the model config plus `metadata`.
  Checkpoint to_checkpoint(const nlohmann::json& metadata = nlohmann::json::object()) const;
  /// Rebuilds a model from a checkpoint written by to_checkpoint.
  static HiclModel from_checkpoint(const Checkpoint& ckpt);

  Backbone backbone;
  std::vector<Expert> experts;
  std::vector<Prototype> prototypes;

 private:
  ModelConfig config_;
};

/// Fraction of rows whose hard-gate expert equals expert_for_task(task of the row).
double routing_accuracy(const HiclModel& model, const Tensor& inputs, std::span<const std::size_t> tasks);
/// Same over the test splits of the first `tasks_seen` tasks of a stream.
double routing_accuracy(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen);

}  // namespace hicl
