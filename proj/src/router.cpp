#include "hicl/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hicl {

std::string to_string(GateMode mode) {
  switch (mode) {
    case GateMode::soft: return "soft";
    case GateMode::hard: return "hard";
    case GateMode::top2: return "top2";
    case GateMode::hybrid: return "hybrid";
  }
  return "unknown";
}

GateMode parse_gate_mode(const std::string& name) {
  if (name == "soft") return GateMode::soft;
  if (name == "hard") return GateMode::hard;
  if (name == "top2") return GateMode::top2;
  if (name == "hybrid") return GateMode::hybrid;
  throw ConfigError("unknown gating mode '" + name + "' (expected soft, hard, top2 or hybrid)");
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

void update_prototype(Prototype& proto, std::span<const double> code) {
  if (code.size() != proto.vector.size()) {
    throw DimensionError("update_prototype: code length " + std::to_string(code.size()) + " vs prototype " +
                         std::to_string(proto.vector.size()));
  }
  const double mu = proto.ema_rate;
  for (std::size_t i = 0; i < code.size(); ++i) proto.vector[i] = (1.0 - mu) * proto.vector[i] + mu * code[i];
  ++proto.update_count;
}

std::size_t GateDecision::top() const {
  return static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
}

namespace {

// Softmax of s/tau restricted to `members`, written into weights.
void softmax_over(std::span<const double> s, const std::vector<std::size_t>& members, double tau,
                  std::vector<double>& weights) {
  double mx = -INFINITY;
  for (std::size_t i : members) mx = std::max(mx, s[i]);
  double z = 0.0;
  for (std::size_t i : members) {
    weights[i] = std::exp((s[i] - mx) / tau);
    z += weights[i];
  }
  for (std::size_t i : members) weights[i] /= z;
}

// Eligible experts ordered by similarity descending, lowest id first on ties.
std::vector<std::size_t> ranked(std::span<const double> s, const std::vector<bool>& eligible) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (eligible[i]) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return order;
}

}  // namespace

GateDecision gate_from_similarities(std::span<const double> similarities, const std::vector<bool>& eligible,
                                    GateMode mode, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("gate temperature must be > 0");
  if (eligible.size() != similarities.size()) throw DimensionError("gate: eligibility mask length mismatch");
  GateDecision d;
  d.mode = mode;
  d.similarities.assign(similarities.begin(), similarities.end());
  d.weights.assign(similarities.size(), 0.0);
  const auto order = ranked(similarities, eligible);
  if (order.empty()) throw RoutingError("no expert has a warm prototype to route to");

  switch (mode) {
    case GateMode::hard:
      d.weights[order[0]] = 1.0;
      break;
    case GateMode::soft:
      softmax_over(similarities, order, temperature, d.weights);
      break;
    case GateMode::top2: {
      if (order.size() == 1) {
        d.weights[order[0]] = 1.0;
        break;
      }
      const std::size_t a = order[0], b = order[1];
      if (similarities[a] > 0.0 && similarities[b] > 0.0) {
        const double total = similarities[a] + similarities[b];
        d.weights[a] = similarities[a] / total;
        d.weights[b] = similarities[b] / total;
      } else {
        softmax_over(similarities, {a, b}, temperature, d.weights);
      }
      break;
    }
    case GateMode::hybrid: {
      std::vector<std::size_t> best(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(2, order.size())));
      softmax_over(similarities, best, temperature, d.weights);
      break;
    }
  }
  for (std::size_t i = 0; i < d.weights.size(); ++i) {
    if (d.weights[i] > 0.0) d.selected.push_back(i);
  }
  return d;
}

GateDecision gate(const std::vector<DgCode>& codes, const std::vector<Prototype>& prototypes, GateMode mode,
                  double temperature) {
  if (codes.size() != prototypes.size()) throw DimensionError("gate: one code per expert is required");
  std::vector<double> s(codes.size(), 0.0);
  std::vector<bool> eligible(codes.size(), false);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    eligible[i] = !prototypes[i].cold();
    if (eligible[i]) s[i] = cosine_similarity(codes[i].values, prototypes[i].vector.data());
  }
  return gate_from_similarities(s, eligible, mode, temperature);
}

void ModelConfig::validate() const {
  encoder.validate();
  if (num_experts == 0) throw ConfigError("num_experts must be positive");
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) throw ConfigError("ema_rate must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
}

nlohmann::json to_json(const ModelConfig& config) {
  const EncoderConfig& e = config.encoder;
  return nlohmann::json{
      {"input_dim", e.input_dim},
      {"backbone_widths", e.backbone_widths},
      {"grid_units", e.grid_units},
      {"grid_dim", e.grid_dim},
      {"grid_scale", e.grid_scale},
      {"dg_dim", e.dg_dim},
      {"sparsity_rho", e.sparsity_rho},
      {"ca3_widths", e.ca3_widths},
      {"ca1_widths", e.ca1_widths},
      {"num_classes", e.num_classes},
      {"layer_norm_eps", e.layer_norm_eps},
      {"num_experts", config.num_experts},
      {"ema_rate", config.ema_rate},
      {"temperature", config.temperature},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"input_dim",  "backbone_widths", "grid_units",     "grid_dim", "grid_scale",
                                                 "dg_dim",     "sparsity_rho",    "ca3_widths",     "ca1_widths",
                                                 "num_classes", "layer_norm_eps", "num_experts",    "ema_rate",
                                                 "temperature"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown model key '" + key + "'");
  }
  ModelConfig c;
  EncoderConfig& e = c.encoder;
  try {
    e.input_dim = j.value("input_dim", e.input_dim);
    e.backbone_widths = j.value("backbone_widths", e.backbone_widths);
    e.grid_units = j.value("grid_units", e.grid_units);
    e.grid_dim = j.value("grid_dim", e.grid_dim);
    e.grid_scale = j.value("grid_scale", e.grid_scale);
    e.dg_dim = j.value("dg_dim", e.dg_dim);
    e.sparsity_rho = j.value("sparsity_rho", e.sparsity_rho);
    e.ca3_widths = j.value("ca3_widths", e.ca3_widths);
    e.ca1_widths = j.value("ca1_widths", e.ca1_widths);
    e.num_classes = j.value("num_classes", e.num_classes);
    e.layer_norm_eps = j.value("layer_norm_eps", e.layer_norm_eps);
    c.num_experts = j.value("num_experts", c.num_experts);
    c.ema_rate = j.value("ema_rate", c.ema_rate);
    c.temperature = j.value("temperature", c.temperature);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("model config: ") + ex.what());
  }
  c.validate();
  return c;
}

HiclModel::HiclModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(seed, "init");
  backbone = Backbone(config_.encoder, rng);
  for (std::size_t i = 0; i < config_.num_experts; ++i) {
    experts.emplace_back(config_.encoder, rng);
    prototypes.push_back(Prototype{i, Tensor(Shape{config_.encoder.dg_dim}), 0, config_.ema_rate});
  }
}

Var HiclModel::features(Tape& tape, const Tensor& inputs) const { return backbone.features(tape, tape.constant(inputs)); }

ExpertForward HiclModel::forward_expert(Tape& tape, const Var& features, std::size_t expert) const {
  return experts.at(expert).forward(tape, features);
}

namespace {

std::vector<GateDecision> gates_for(const std::vector<DgForward>& codes, const std::vector<Prototype>& prototypes,
                                    std::size_t rows, GateMode mode, double temperature) {
  std::vector<bool> eligible(prototypes.size());
  for (std::size_t i = 0; i < prototypes.size(); ++i) eligible[i] = !prototypes[i].cold();
  std::vector<GateDecision> gates;
  gates.reserve(rows);
  std::vector<double> s(prototypes.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < prototypes.size(); ++i) {
      s[i] = eligible[i] ? cosine_similarity(codes[i].code.value().row(r), prototypes[i].vector.data()) : 0.0;
    }
    gates.push_back(gate_from_similarities(s, eligible, mode, temperature));
  }
  return gates;
}

}  // namespace

std::vector<GateDecision> HiclModel::route(const Tensor& inputs, GateMode mode) const {
  Tape tape(false);
  Var f = features(tape, inputs);
  std::vector<DgForward> codes;
  for (const Expert& e : experts) codes.push_back(e.encode(tape, f));
  return gates_for(codes, prototypes, inputs.rows(), mode, config_.temperature);
}

MoeOutput HiclModel::moe_forward(const Tensor& inputs, GateMode mode, bool conditional) const {
  Tape tape(false);
  Var f = features(tape, inputs);
  std::vector<DgForward> codes;
  for (const Expert& e : experts) codes.push_back(e.encode(tape, f));

  MoeOutput out;
  const std::size_t rows = inputs.rows();
  out.gates = gates_for(codes, prototypes, rows, mode, config_.temperature);
  out.logits = Tensor(Shape{rows, config_.encoder.num_classes});
  out.executed_experts.assign(rows, 0);

  for (std::size_t i = 0; i < experts.size(); ++i) {
    std::vector<std::size_t> members;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!conditional || out.gates[r].weights[i] > 0.0) members.push_back(r);
    }
    if (members.empty()) continue;
    const Tensor sub_codes = codes[i].code.value().gather_rows(members);
    const Tensor logits = experts[i].readout(tape, tape.constant(sub_codes)).value();
    for (std::size_t m = 0; m < members.size(); ++m) {
      const std::size_t r = members[m];
      const double alpha = out.gates[r].weights[i];
      auto dst = out.logits.row(r);
      const auto src = logits.row(m);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += alpha * src[c];
      ++out.executed_experts[r];
    }
  }
  return out;
}

Tensor HiclModel::expert_logits(const Tensor& inputs, std::size_t expert) const {
  Tape tape(false);
  return forward_expert(tape, features(tape, inputs), expert).logits.value();
}

std::vector<DgCode> HiclModel::dg_codes(const Tensor& inputs, std::size_t expert) const {
  Tape tape(false);
  DgForward dg = experts.at(expert).encode(tape, features(tape, inputs));
  std::vector<DgCode> out;
  out.reserve(inputs.rows());
  for (std::size_t r = 0; r < inputs.rows(); ++r) out.push_back(dg.row(r));
  return out;
}

std::vector<NamedParameter> HiclModel::named_parameters() {
  std::vector<NamedParameter> out;
  visit_parameters([&out](const std::string& name, Parameter& p) { out.push_back({name, &p}); });
  return out;
}

std::vector<Parameter*> HiclModel::parameters() {
  std::vector<Parameter*> out;
  visit_parameters([&out](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

void HiclModel::unfreeze_all() {
  visit_parameters([](const std::string&, Parameter& p) { p.requires_grad = true; });
}

void HiclModel::freeze_non_dg() {
  visit_parameters([](const std::string&, Parameter& p) { p.requires_grad = false; });
  for (Expert& e : experts) {
    for (Parameter* p : e.dg_parameters()) p->requires_grad = true;
  }
}

Checkpoint HiclModel::to_checkpoint(const nlohmann::json& metadata) const {
  Checkpoint ckpt;
  nlohmann::json header{{"format", "hicl-checkpoint"}, {"model", to_json(config_)}, {"metadata", metadata}};
  ckpt.header = header.dump();
  visit_parameters([&ckpt](const std::string& name, const Parameter& p) { ckpt.records.push_back({name, p.value}); });
  for (const Prototype& proto : prototypes) {
    const std::string base = "prototype" + std::to_string(proto.expert_id);
    ckpt.records.push_back({base + ".vector", proto.vector});
    ckpt.records.push_back({base + ".update_count", Tensor::scalar(static_cast<double>(proto.update_count))});
  }
  return ckpt;
}

HiclModel HiclModel::from_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ckpt.header);
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + ex.what());
  }
  if (!header.contains("model")) throw CheckpointError("checkpoint header lacks a model config record");
  HiclModel model(model_config_from_json(header["model"]), 0);
  model.visit_parameters([&ckpt](const std::string& name, Parameter& p) {
    const Tensor& stored = ckpt.find(name);
    if (!stored.same_shape(p.value)) {
      throw CheckpointError("record '" + name + "' has shape " + shape_string(stored.shape()) + ", model expects " +
                            shape_string(p.value.shape()));
    }
    p.value = stored;
    p.zero_grad();
  });
  for (Prototype& proto : model.prototypes) {
    const std::string base = "prototype" + std::to_string(proto.expert_id);
    const Tensor& vec = ckpt.find(base + ".vector");
    if (!vec.same_shape(proto.vector)) throw CheckpointError("prototype " + base + " has wrong shape");
    proto.vector = vec;
    proto.update_count = static_cast<std::size_t>(ckpt.find(base + ".update_count").item());
  }
  return model;
}

double routing_accuracy(const HiclModel& model, const Tensor& inputs, std::span<const std::size_t> tasks) {
  if (tasks.size() != inputs.rows()) throw DimensionError("routing_accuracy: one task id per row is required");
  if (tasks.empty()) return 0.0;
  const auto gates = model.route(inputs, GateMode::hard);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < gates.size(); ++r) hits += gates[r].top() == model.expert_for_task(tasks[r]);
  return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

double routing_accuracy(const HiclModel& model, const TaskStream& stream, std::size_t tasks_seen) {
  std::size_t hits = 0, total = 0;
  for (std::size_t t = 0; t < tasks_seen && t < stream.tasks.size(); ++t) {
    const LabeledData& test = stream.tasks[t].test;
    if (test.size() == 0) continue;
    const std::vector<std::size_t> ids(test.size(), t);
    hits += static_cast<std::size_t>(std::llround(routing_accuracy(model, test.inputs, ids) * static_cast<double>(test.size())));
    total += test.size();
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace hicl
