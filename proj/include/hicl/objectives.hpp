#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hicl/replay.hpp"
#include "hicl/router.hpp"

namespace hicl {

struct LossWeights {
  double alpha_intra = 0.1;
  double alpha_rep = 1.0;
  double alpha_dist = 0.1;
  double alpha_ewc = 0.1;
  double alpha_s = 0.01;
  double alpha_contrastive = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 0.0;
  double lambda4 = 0.0;
  double m_intra = 1.0;
  double m_contrastive = 0.2;
  double lambda_push = 1.0;
  double ewc_floor = 0.05;
  double sparsity_temperature = 0.01;
  /// Divide the intra-batch push/pull sums by the number of pairs in the batch.
  bool intra_pair_mean = true;
  /// Use cos(p^(t), u_j) instead of cos(p^(j), u_j) in the Phase II hinge.
  bool phase2_cross_form = false;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Diagonal Fisher and anchor values of one finished task.
struct FisherEntry {
  std::string name;
  Tensor fisher;
  Tensor anchor;
};

struct FisherInfo {
  std::size_t task_id = 0;
  std::vector<FisherEntry> entries;
};

/// Mean cross-entropy over the batch.
Var loss_cls(const Var& logits, std::span<const std::size_t> labels);

/// Same-label pull minus lambda_push times the squared hinge on different-label
/// distances, each unordered pair counted once.
Var loss_intra(const Var& codes, std::span<const std::size_t> labels, double lambda_push, double margin,
               bool pair_mean);

struct PerSampleLoss {
  Var loss;  // scalar mean
  std::vector<double> per_sample;
};

/// Mean cross-entropy of replayed items, each routed through the expert of its
/// stored task. An empty batch gives a constant 0.
PerSampleLoss loss_replay(Tape& tape, const HiclModel& model, const std::vector<ReplayItem>& batch);

/// Mean squared error against features of a frozen snapshot; no gradient reaches the snapshot.
Var loss_distill(const Var& features, const Tensor& snapshot_features);

/// Sum over stored tasks of w_t * sum_j F_j (theta_j - anchor_j)^2. `task_weights`
/// holds one w_t per FisherInfo. Parameters are looked up by name.
Var loss_ewc(Tape& tape, const std::vector<NamedParameter>& params, const std::vector<FisherInfo>& fisher,
             std::span<const double> task_weights);

/// w_t = max(0, cos(u_current, u_t)) + floor.
double ewc_task_weight(const Prototype& current, const Prototype& anchor_task, double floor);

/// |mean(sigmoid(z / temperature)) - rho|.
Var loss_sparsity(const Var& z, double rho, double temperature);

/// Phase II prototype loss. `codes[j]` are expert j's DG codes of the batch rows,
/// `targets[r]` the expert owning row r. Per row:
///   1 - cos(p^(t), u_t) + sum over warm j != t of max(0, cos(p^(j), u_j) - m),
/// or cos(p^(t), u_j) in the hinge when `cross_form`. Cold target prototypes
/// throw RoutingError.
PerSampleLoss loss_contrastive(const std::vector<Var>& codes, std::span<const std::size_t> targets,
                               const std::vector<Prototype>& prototypes, double margin, bool cross_form);

/// Phase I terms; invalid Vars stand for absent terms.
struct Phase1Terms {
  Var cls;
  Var intra;
  Var replay;
  Var distill;
  Var ewc;
  Var sparsity;
};

Var compose_phase1(const LossWeights& w, const Phase1Terms& terms);
Var compose_phase2(const LossWeights& w, const Var& contrastive);
/// lambda1 phase1 + lambda2 phase2 + lambda3 ewc + lambda4 replay over the valid terms.
Var compose_full(const LossWeights& w, const Var& phase1, const Var& phase2, const Var& ewc, const Var& replay);

/// Empirical diagonal Fisher: mean squared per-sample gradient of the
/// classification loss over the last `samples` rows of `data`, routed through the
/// task's expert. Entries whose Fisher is identically zero are dropped.
FisherInfo estimate_fisher(HiclModel& model, const LabeledData& data, std::size_t task_id, std::size_t samples);

}  // namespace hicl
