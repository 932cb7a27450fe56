#include "hicl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace hicl {

void LossWeights::validate() const {
  const std::pair<const char*, double> coefficients[] = {
      {"alpha_intra", alpha_intra}, {"alpha_rep", alpha_rep},     {"alpha_dist", alpha_dist},
      {"alpha_ewc", alpha_ewc},     {"alpha_s", alpha_s},         {"alpha_contrastive", alpha_contrastive},
      {"lambda1", lambda1},         {"lambda2", lambda2},         {"lambda3", lambda3},
      {"lambda4", lambda4},         {"lambda_push", lambda_push}, {"ewc_floor", ewc_floor},
  };
  for (const auto& [name, v] : coefficients) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a nonnegative number");
  }
  for (const auto& [name, v] : {std::pair{"m_intra", m_intra}, std::pair{"m_contrastive", m_contrastive}}) {
    if (!(v >= 0.0 && v <= 2.0)) throw ConfigError(std::string(name) + " must lie in [0, 2]");
  }
  if (!(sparsity_temperature > 0.0)) throw ConfigError("sparsity_temperature must be > 0");
}

Var loss_cls(const Var& logits, std::span<const std::size_t> labels) { return mean(cross_entropy_rows(logits, labels)); }

Var loss_intra(const Var& codes, std::span<const std::size_t> labels, double lambda_push, double margin,
               bool pair_mean) {
  const Tensor& p = codes.value();
  const std::size_t n = p.rows();
  const std::size_t d = p.cols();
  if (labels.size() != n) throw DimensionError("loss_intra: one label per code row is required");
  const double pairs = n > 1 ? static_cast<double>(n * (n - 1) / 2) : 1.0;
  const double norm = pair_mean ? 1.0 / pairs : 1.0;

  // dL/d(dist) coefficients per pair, so backward needs no recomputation of distances.
  struct PairTerm {
    std::size_t i, j;
    double coeff;  // dL = coeff * (p_i - p_j) for p_i, negated for p_j
  };
  std::vector<PairTerm> terms;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = p.at(i, c) - p.at(j, c);
        sq += diff * diff;
      }
      if (labels[i] == labels[j]) {
        total += sq;
        terms.push_back({i, j, 2.0 * norm});
      } else {
        const double dist = std::sqrt(sq);
        const double gap = margin - dist;
        if (gap > 0.0) {
          total -= lambda_push * gap * gap;
          // d/dp_i of -lambda (m - |p_i - p_j|)^2 = 2 lambda (m - dist) (p_i - p_j) / dist
          if (dist > 0.0) terms.push_back({i, j, 2.0 * lambda_push * gap / dist * norm});
        }
      }
    }
  }
  return codes.tape().record(Tensor::scalar(total * norm), {codes},
                             [codes, terms = std::move(terms), d](Tape& t, const Tensor& g) {
                               const Tensor& p = codes.value();
                               Tensor dp(p.shape());
                               const double scale = g.item();
                               for (const PairTerm& term : terms) {
                                 for (std::size_t c = 0; c < d; ++c) {
                                   const double v = scale * term.coeff * (p.at(term.i, c) - p.at(term.j, c));
                                   dp.at(term.i, c) += v;
                                   dp.at(term.j, c) -= v;
                                 }
                               }
                               t.accumulate(codes, dp);
                             });
}

PerSampleLoss loss_replay(Tape& tape, const HiclModel& model, const std::vector<ReplayItem>& batch) {
  PerSampleLoss out;
  if (batch.empty()) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  const std::size_t dim = model.config().encoder.input_dim;
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    if (batch[r].input.size() != dim) throw DimensionError("replay item has the wrong input width");
    groups[model.expert_for_task(batch[r].task_id)].push_back(r);
  }
  out.per_sample.assign(batch.size(), 0.0);
  Var total;
  for (const auto& [expert, rows] : groups) {
    Tensor x(Shape{rows.size(), dim});
    std::vector<std::size_t> labels;
    for (std::size_t m = 0; m < rows.size(); ++m) {
      std::copy(batch[rows[m]].input.begin(), batch[rows[m]].input.end(), x.row(m).begin());
      labels.push_back(batch[rows[m]].label);
    }
    Var ce = cross_entropy_rows(model.forward_expert(tape, model.features(tape, x), expert).logits, labels);
    for (std::size_t m = 0; m < rows.size(); ++m) out.per_sample[rows[m]] = ce.value()[m];
    Var s = sum(ce);
    total = total.valid() ? add(total, s) : s;
  }
  out.loss = scale(total, 1.0 / static_cast<double>(batch.size()));
  return out;
}

Var loss_distill(const Var& features, const Tensor& snapshot_features) {
  if (!features.value().same_shape(snapshot_features)) {
    throw DimensionError("loss_distill: feature shapes " + shape_string(features.shape()) + " and " +
                         shape_string(snapshot_features.shape()));
  }
  return mean(square(sub(features, features.tape().constant(snapshot_features))));
}

Var loss_ewc(Tape& tape, const std::vector<NamedParameter>& params, const std::vector<FisherInfo>& fisher,
             std::span<const double> task_weights) {
  if (task_weights.size() != fisher.size()) throw DimensionError("loss_ewc: one weight per Fisher set is required");
  std::map<std::string, const Parameter*> by_name;
  for (const NamedParameter& np : params) by_name[np.name] = np.param;

  // Merge every task's contribution into one fused term per parameter.
  struct Merged {
    std::vector<std::pair<const FisherEntry*, double>> parts;
  };
  std::map<std::string, Merged> merged;
  for (std::size_t t = 0; t < fisher.size(); ++t) {
    for (const FisherEntry& e : fisher[t].entries) {
      const auto it = by_name.find(e.name);
      if (it == by_name.end()) throw CheckpointError("EWC anchor '" + e.name + "' matches no model parameter");
      if (!e.anchor.same_shape(it->second->value) || !e.fisher.same_shape(it->second->value)) {
        throw CheckpointError("EWC anchor '" + e.name + "' has shape " + shape_string(e.anchor.shape()) +
                              ", parameter has " + shape_string(it->second->value.shape()));
      }
      merged[e.name].parts.push_back({&e, task_weights[t]});
    }
  }
  Var total = tape.constant(Tensor::scalar(0.0));
  for (const auto& [name, m] : merged) {
    Var theta = tape.parameter(*by_name.at(name));
    const Tensor& th = theta.value();
    double value = 0.0;
    for (const auto& [entry, w] : m.parts) {
      for (std::size_t i = 0; i < th.size(); ++i) {
        const double diff = th[i] - entry->anchor[i];
        value += w * entry->fisher[i] * diff * diff;
      }
    }
    Var term = tape.record(Tensor::scalar(value), {theta}, [theta, parts = m.parts](Tape& t, const Tensor& g) {
      const Tensor& th = theta.value();
      Tensor d(th.shape());
      for (const auto& [entry, w] : parts) {
        for (std::size_t i = 0; i < th.size(); ++i) d[i] += g.item() * 2.0 * w * entry->fisher[i] * (th[i] - entry->anchor[i]);
      }
      t.accumulate(theta, d);
    });
    total = add(total, term);
  }
  return total;
}

double ewc_task_weight(const Prototype& current, const Prototype& anchor_task, double floor) {
  return std::max(0.0, cosine_similarity(current.vector.data(), anchor_task.vector.data())) + floor;
}

Var loss_sparsity(const Var& z, double rho, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("sparsity surrogate temperature must be > 0");
  return abs(add_scalar(mean(sigmoid(scale(z, 1.0 / temperature))), -rho));
}

PerSampleLoss loss_contrastive(const std::vector<Var>& codes, std::span<const std::size_t> targets,
                               const std::vector<Prototype>& prototypes, double margin, bool cross_form) {
  if (codes.empty() || codes.size() != prototypes.size()) {
    throw DimensionError("loss_contrastive: one code batch per prototype is required");
  }
  const std::size_t rows = codes[0].value().rows();
  if (targets.size() != rows) throw DimensionError("loss_contrastive: one target per row is required");
  const std::size_t n = codes.size();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= n) throw RoutingError("contrastive target expert " + std::to_string(targets[r]) + " out of range");
    if (prototypes[targets[r]].cold()) {
      throw RoutingError("contrastive target prototype " + std::to_string(targets[r]) + " is cold");
    }
  }
  Tape& tape = codes[0].tape();
  auto mask = [&](auto pred) {
    Tensor m(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) m[r] = pred(targets[r]) ? 1.0 : 0.0;
    return tape.constant(std::move(m));
  };
  auto hinge = [&](const Var& cos) { return relu(add_scalar(cos, -margin)); };

  Var total;
  auto accumulate = [&total](const Var& v) { total = total.valid() ? add(total, v) : v; };
  for (std::size_t t = 0; t < n; ++t) {
    if (prototypes[t].cold()) continue;
    // Pull: rows owned by expert t align their own code with u_t.
    const Var own = cosine_rows(codes[t], prototypes[t].vector);
    accumulate(mul(mask([t](std::size_t tgt) { return tgt == t; }), scale(add_scalar(own, -1.0), -1.0)));
    if (!cross_form) {
      // Push: rows owned by any other expert keep cos(p^(t), u_t) below the margin.
      accumulate(mul(mask([t](std::size_t tgt) { return tgt != t; }), hinge(own)));
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == t || prototypes[j].cold()) continue;
      const Var cross = cosine_rows(codes[t], prototypes[j].vector);
      accumulate(mul(mask([t](std::size_t tgt) { return tgt == t; }), hinge(cross)));
    }
  }
  PerSampleLoss out;
  out.per_sample = total.value().values();
  out.loss = mean(total);
  return out;
}

namespace {

Var weighted(const Var& v, double w) { return w == 1.0 ? v : scale(v, w); }

Var weighted_sum(std::initializer_list<std::pair<Var, double>> terms) {
  Var total;
  for (const auto& [v, w] : terms) {
    if (!v.valid()) continue;
    const Var term = weighted(v, w);
    total = total.valid() ? add(total, term) : term;
  }
  if (!total.valid()) throw Error("loss composition needs at least one term");
  return total;
}

}  // namespace

Var compose_phase1(const LossWeights& w, const Phase1Terms& t) {
  if (!t.cls.valid()) throw Error("Phase I loss requires the classification term");
  return weighted_sum({{t.cls, 1.0},
                       {t.intra, w.alpha_intra},
                       {t.replay, w.alpha_rep},
                       {t.distill, w.alpha_dist},
                       {t.ewc, w.alpha_ewc},
                       {t.sparsity, w.alpha_s}});
}

Var compose_phase2(const LossWeights& w, const Var& contrastive) { return weighted_sum({{contrastive, w.alpha_contrastive}}); }

Var compose_full(const LossWeights& w, const Var& phase1, const Var& phase2, const Var& ewc, const Var& replay) {
  return weighted_sum({{phase1, w.lambda1}, {phase2, w.lambda2}, {ewc, w.lambda3}, {replay, w.lambda4}});
}

FisherInfo estimate_fisher(HiclModel& model, const LabeledData& data, std::size_t task_id, std::size_t samples) {
  FisherInfo info;
  info.task_id = task_id;
  const auto params = model.named_parameters();
  std::vector<Tensor> sq;
  std::vector<bool> trainable;
  for (const NamedParameter& np : params) {
    sq.emplace_back(np.param->value.shape());
    trainable.push_back(np.param->requires_grad);
    np.param->requires_grad = true;
  }
  const std::size_t count = std::min(samples, data.size());
  const std::size_t first = data.size() - count;
  const std::size_t expert = model.expert_for_task(task_id);
  for (std::size_t r = first; r < data.size(); ++r) {
    for (const NamedParameter& np : params) np.param->zero_grad();
    Tape tape;
    const std::size_t row[] = {r};
    const std::size_t label[] = {data.labels[r]};
    Var logits = model.forward_expert(tape, model.features(tape, data.inputs.gather_rows(row)), expert).logits;
    tape.backward(loss_cls(logits, label));
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Tensor& g = params[p].param->grad;
      for (std::size_t i = 0; i < g.size(); ++i) sq[p][i] += g[i] * g[i];
    }
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    params[p].param->zero_grad();
    params[p].param->requires_grad = trainable[p];
    if (count == 0) continue;
    bool any = false;
    for (double& v : sq[p].data()) {
      v /= static_cast<double>(count);
      any = any || v != 0.0;
    }
    if (any) info.entries.push_back({params[p].name, std::move(sq[p]), params[p].param->value});
  }
  return info;
}

}  // namespace hicl
