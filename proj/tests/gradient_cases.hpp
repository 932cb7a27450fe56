#pragma once

// Finite-difference cases shared by the unit tests and the acceptance binary.
// Each case builds its inputs from a seed and returns the worst per-tensor
// relative error of the tape gradient against central differences.

#include <functional>
#include <string>
#include <vector>

#include "hicl/objectives.hpp"
#include "support.hpp"

namespace hicl::test {

struct GradientCase {
  std::string name;
  double tolerance;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

namespace detail {

/// sum(op(x) * probe) for random x of the given shape.
inline GradientCase unary(std::string name, Shape shape, std::function<Var(const Var&)> op, double lo = -1.0,
                          double hi = 1.0) {
  return {std::move(name), 1e-4, [=](std::uint64_t seed) {
            Rng rng(seed);
            Parameter x(random_tensor(shape, rng, lo, hi));
            Tensor probe;
            {
              Tape t(false);
              probe = random_tensor(op(t.constant(x.value)).shape(), rng);
            }
            return check_gradients({{"x", &x}}, [&](Tape& t) { return sum(mul(op(t.parameter(x)), t.constant(probe))); });
          }};
}

inline GradientCase binary(std::string name, Shape a_shape, Shape b_shape,
                           std::function<Var(const Var&, const Var&)> op) {
  return {std::move(name), 1e-4, [=](std::uint64_t seed) {
            Rng rng(seed);
            Parameter a(random_tensor(a_shape, rng));
            Parameter b(random_tensor(b_shape, rng));
            Tensor probe;
            {
              Tape t(false);
              probe = random_tensor(op(t.constant(a.value), t.constant(b.value)).shape(), rng);
            }
            return check_gradients({{"a", &a}, {"b", &b}}, [&](Tape& t) {
              return sum(mul(op(t.parameter(a), t.parameter(b)), t.constant(probe)));
            });
          }};
}

inline std::vector<ReplayItem> replay_items(const ModelConfig& cfg, std::size_t tasks, std::size_t per_task, Rng& rng) {
  std::vector<ReplayItem> items;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t t = 0; t < tasks; ++t) {
    for (std::size_t i = 0; i < per_task; ++i) {
      ReplayItem item;
      item.input.resize(cfg.encoder.input_dim);
      for (double& v : item.input) v = u(rng);
      item.label = (t + i) % cfg.encoder.num_classes;
      item.task_id = t;
      items.push_back(std::move(item));
    }
  }
  return items;
}

inline std::vector<FisherInfo> random_fisher(std::vector<NamedParameter>& params, std::size_t tasks, Rng& rng) {
  std::vector<FisherInfo> out;
  std::uniform_real_distribution<double> u(0.0, 1.0), shift(-0.3, 0.3);
  for (std::size_t t = 0; t < tasks; ++t) {
    FisherInfo info{t, {}};
    for (const NamedParameter& np : params) {
      FisherEntry e{np.name, Tensor(np.param->value.shape()), np.param->value};
      for (double& v : e.fisher.data()) v = u(rng);
      for (double& v : e.anchor.data()) v += shift(rng);
      info.entries.push_back(std::move(e));
    }
    out.push_back(std::move(info));
  }
  return out;
}

inline void warm_prototypes(HiclModel& model, Rng& rng) {
  for (Prototype& p : model.prototypes) {
    p.vector = random_tensor({model.config().encoder.dg_dim}, rng, 0.0, 1.0);
    p.update_count = 1;
  }
}

}  // namespace detail

/// Every differentiable tape operation, at tolerance 1e-4.
inline std::vector<GradientCase> op_cases() {
  using namespace detail;
  std::vector<GradientCase> c;
  c.push_back(binary("matmul", {3, 4}, {4, 2}, [](const Var& a, const Var& b) { return matmul(a, b); }));
  c.push_back(binary("add", {3, 4}, {3, 4}, [](const Var& a, const Var& b) { return add(a, b); }));
  c.push_back(binary("add_broadcast", {3, 4}, {}, [](const Var& a, const Var& b) { return add(a, b); }));
  c.push_back(binary("sub", {3, 4}, {3, 4}, [](const Var& a, const Var& b) { return sub(a, b); }));
  c.push_back(binary("mul", {3, 4}, {3, 4}, [](const Var& a, const Var& b) { return mul(a, b); }));
  c.push_back(binary("add_row_bias", {3, 4}, {4}, [](const Var& a, const Var& b) { return add_row_bias(a, b); }));
  c.push_back(binary("concat_cols", {3, 4}, {3, 2}, [](const Var& a, const Var& b) { return concat_cols(a, b); }));
  c.push_back({"linear", 1e-4, [](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter x(random_tensor({3, 4}, rng)), w(random_tensor({4, 5}, rng)), b(random_tensor({5}, rng));
                 const Tensor probe = random_tensor({3, 5}, rng);
                 return check_gradients({{"x", &x}, {"w", &w}, {"b", &b}}, [&](Tape& t) {
                   return sum(mul(linear(t.parameter(x), t.parameter(w), t.parameter(b)), t.constant(probe)));
                 });
               }});
  c.push_back({"layer_norm_affine", 1e-4, [](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter x(random_tensor({3, 6}, rng)), g(random_tensor({6}, rng, 0.5, 1.5)), b(random_tensor({6}, rng));
                 const Tensor probe = random_tensor({3, 6}, rng);
                 return check_gradients({{"x", &x}, {"gain", &g}, {"bias", &b}}, [&](Tape& t) {
                   return sum(mul(layer_norm(t.parameter(x), t.parameter(g), t.parameter(b)), t.constant(probe)));
                 });
               }});
  c.push_back(unary("scale", {3, 4}, [](const Var& v) { return scale(v, -1.7); }));
  c.push_back(unary("add_scalar", {3, 4}, [](const Var& v) { return add_scalar(v, 0.4); }));
  c.push_back(unary("relu", {3, 4}, [](const Var& v) { return relu(v); }));
  c.push_back(unary("sin", {3, 4}, [](const Var& v) { return sin(v); }, -3.0, 3.0));
  c.push_back(unary("sigmoid", {3, 4}, [](const Var& v) { return sigmoid(v); }, -3.0, 3.0));
  c.push_back(unary("square", {3, 4}, [](const Var& v) { return square(v); }));
  c.push_back(unary("abs", {3, 4}, [](const Var& v) { return abs(v); }));
  c.push_back(unary("sum", {3, 4}, [](const Var& v) { return sum(v); }));
  c.push_back(unary("mean", {3, 4}, [](const Var& v) { return mean(v); }));
  c.push_back(unary("layer_norm", {3, 6}, [](const Var& v) { return layer_norm(v); }));
  c.push_back(unary("softmax", {3, 4}, [](const Var& v) { return softmax(v, 0.3); }));
  c.push_back(unary("top_k", {3, 8}, [](const Var& v) { return top_k(v, 3).values; }));
  c.push_back(unary("cross_entropy_rows", {3, 4},
                    [](const Var& v) { return cross_entropy_rows(v, std::vector<std::size_t>{0, 3, 1}); }, -3.0, 3.0));
  c.push_back({"cosine_rows", 1e-4, [](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter x(random_tensor({3, 5}, rng));
                 const Tensor u = random_tensor({5}, rng);
                 const Tensor probe = random_tensor({3}, rng);
                 return check_gradients({{"x", &x}}, [&](Tape& t) {
                   return sum(mul(cosine_rows(t.parameter(x), u), t.constant(probe)));
                 });
               }});
  return c;
}

/// Every loss term and composition, at tolerance 1e-3, on 4-sample batches.
inline std::vector<GradientCase> loss_cases() {
  using namespace detail;
  std::vector<GradientCase> c;
  const std::vector<std::size_t> labels{0, 1, 1, 0};

  c.push_back({"loss_cls", 1e-3, [labels](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter z(random_tensor({4, 3}, rng, -2, 2));
                 return check_gradients({{"logits", &z}}, [&](Tape& t) { return loss_cls(t.parameter(z), labels); });
               }});
  c.push_back({"loss_intra", 1e-3, [labels](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter p(random_tensor({4, 6}, rng, 0, 0.5));
                 return check_gradients({{"codes", &p}},
                                        [&](Tape& t) { return loss_intra(t.parameter(p), labels, 1.0, 1.0, true); });
               }});
  c.push_back({"loss_replay", 1e-3, [](std::uint64_t seed) {
                 Rng rng(seed);
                 HiclModel model(small_model(2), seed);
                 auto params = model.named_parameters();
                 jitter_biases(params, rng);
                 const auto items = replay_items(model.config(), 2, 2, rng);
                 return check_gradients(params, [&](Tape& t) { return loss_replay(t, model, items).loss; });
               }});
  c.push_back({"loss_distill", 1e-3, [](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter f(random_tensor({4, 5}, rng));
                 const Tensor snap = random_tensor({4, 5}, rng);
                 return check_gradients({{"features", &f}}, [&](Tape& t) { return loss_distill(t.parameter(f), snap); });
               }});
  c.push_back({"loss_ewc", 1e-3, [](std::uint64_t seed) {
                 Rng rng(seed);
                 HiclModel model(small_model(2), seed);
                 auto params = model.named_parameters();
                 const auto fisher = random_fisher(params, 2, rng);
                 const std::vector<double> w{0.3, 1.05};
                 return check_gradients(params, [&](Tape& t) { return loss_ewc(t, params, fisher, w); });
               }});
  c.push_back({"loss_sparsity", 1e-3, [](std::uint64_t seed) {
                 Rng rng(seed);
                 Parameter z(random_tensor({4, 10}, rng, -0.03, 0.03));
                 return check_gradients({{"z", &z}}, [&](Tape& t) { return loss_sparsity(t.parameter(z), 0.05, 0.01); });
               }});
  for (bool cross : {false, true}) {
    c.push_back({cross ? "loss_contrastive_cross" : "loss_contrastive", 1e-3, [cross](std::uint64_t seed) {
                   Rng rng(seed);
                   std::vector<Prototype> protos;
                   std::vector<Parameter> codes;
                   for (std::size_t i = 0; i < 3; ++i) {
                     protos.push_back(Prototype{i, random_tensor({6}, rng, 0, 1), 1, 0.01});
                     codes.emplace_back(random_tensor({4, 6}, rng, 0, 1));
                   }
                   std::vector<NamedParameter> params;
                   for (std::size_t i = 0; i < 3; ++i) params.push_back({"code" + std::to_string(i), &codes[i]});
                   const std::vector<std::size_t> targets{0, 1, 2, 1};
                   return check_gradients(params, [&](Tape& t) {
                     std::vector<Var> vars;
                     for (const Parameter& p : codes) vars.push_back(t.parameter(p));
                     return loss_contrastive(vars, targets, protos, 0.2, cross).loss;
                   });
                 }});
  }
  c.push_back({"phase1_objective", 1e-3, [labels](std::uint64_t seed) {
                 Rng rng(seed);
                 HiclModel model(small_model(3), seed);
                 auto params = model.named_parameters();
                 jitter_biases(params, rng);
                 warm_prototypes(model, rng);
                 const Tensor x = random_tensor({4, model.config().encoder.input_dim}, rng, 0, 1);
                 const auto items = replay_items(model.config(), 1, 3, rng);
                 const auto fisher = random_fisher(params, 1, rng);
                 Tensor snapshot;
                 {
                   HiclModel other(model.config(), seed + 1000);
                   Tape t(false);
                   snapshot = other.features(t, x).value();
                 }
                 const std::vector<double> w{ewc_task_weight(model.prototypes[1], model.prototypes[0], 0.05)};
                 LossWeights weights;
                 return check_gradients(params, [&](Tape& t) {
                   const Var f = model.features(t, x);
                   const ExpertForward e = model.forward_expert(t, f, 1);
                   Phase1Terms terms;
                   terms.cls = loss_cls(e.logits, labels);
                   terms.intra = loss_intra(e.dg.code, labels, weights.lambda_push, weights.m_intra, true);
                   terms.replay = loss_replay(t, model, items).loss;
                   terms.distill = loss_distill(f, snapshot);
                   terms.ewc = loss_ewc(t, params, fisher, w);
                   terms.sparsity = loss_sparsity(e.dg.z, 0.25, weights.sparsity_temperature);
                   return compose_phase1(weights, terms);
                 });
               }});
  c.push_back({"full_objective_strict", 1e-3, [labels](std::uint64_t seed) {
                 Rng rng(seed);
                 HiclModel model(small_model(2), seed);
                 auto params = model.named_parameters();
                 jitter_biases(params, rng);
                 warm_prototypes(model, rng);
                 const Tensor x = random_tensor({4, model.config().encoder.input_dim}, rng, 0, 1);
                 const auto items = replay_items(model.config(), 1, 2, rng);
                 const auto fisher = random_fisher(params, 1, rng);
                 LossWeights weights;
                 weights.lambda3 = weights.lambda4 = 1.0;
                 const std::vector<double> w{1.0};
                 const std::vector<std::size_t> targets{1, 1, 0, 0};
                 return check_gradients(params, [&](Tape& t) {
                   const Var f = model.features(t, x);
                   const ExpertForward e = model.forward_expert(t, f, 1);
                   const Var ewc = loss_ewc(t, params, fisher, w);
                   const Var replay = loss_replay(t, model, items).loss;
                   Phase1Terms terms;
                   terms.cls = loss_cls(e.logits, labels);
                   terms.ewc = ewc;
                   terms.replay = replay;
                   std::vector<Var> codes;
                   for (std::size_t i = 0; i < 2; ++i) codes.push_back(model.forward_expert(t, f, i).dg.code);
                   const Var p2 = compose_phase2(weights, loss_contrastive(codes, targets, model.prototypes, 0.2, false).loss);
                   return compose_full(weights, compose_phase1(weights, terms), p2, ewc, replay);
                 });
               }});
  return c;
}

}  // namespace hicl::test
