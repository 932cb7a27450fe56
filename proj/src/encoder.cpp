#include "hicl/encoder.hpp"

#include <cmath>
#include <numbers>

namespace hicl {

std::size_t EncoderConfig::k() const {
  return static_cast<std::size_t>(std::floor(sparsity_rho * static_cast<double>(dg_dim)));
}

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(input_dim, "input_dim");
  for (std::size_t w : backbone_widths) positive(w, "backbone width");
  positive(grid_units, "grid_units");
  positive(grid_dim, "grid_dim");
  positive(dg_dim, "dg_dim");
  for (std::size_t w : ca3_widths) positive(w, "ca3 width");
  for (std::size_t w : ca1_widths) positive(w, "ca1 width");
  positive(num_classes, "num_classes");
  if (!(sparsity_rho > 0.0 && sparsity_rho < 1.0)) {
    throw ConfigError("sparsity_rho must lie in (0, 1), got " + std::to_string(sparsity_rho));
  }
  if (k() < 1) throw ConfigError("floor(sparsity_rho * dg_dim) must be at least 1");
  if (k() >= dg_dim) throw ConfigError("top-k size " + std::to_string(k()) + " must be below dg_dim");
  if (dg_dim < 2 || ca3_widths[1] < 2) throw ConfigError("normalized layers need at least 2 units");
  if (!(grid_scale > 0.0) || !std::isfinite(grid_scale)) throw ConfigError("grid_scale must be > 0");
  if (!(layer_norm_eps >= 0.0)) throw ConfigError("layer_norm_eps must be nonnegative");
}

Dense::Dense(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor w(Shape{in, out});
  for (double& v : w.data()) v = dist(rng);
  weight = Parameter(std::move(w));
  bias = Parameter(Tensor(Shape{out}));
}

Var Dense::forward(Tape& tape, const Var& x) const {
  return linear(x, tape.parameter(weight), tape.parameter(bias));
}

NormAffine::NormAffine(std::size_t dim) : gain(Tensor(Shape{dim}, 1.0)), bias(Tensor(Shape{dim}, 0.0)) {}

Backbone::Backbone(const EncoderConfig& config, Rng& rng) : input_dim_(config.input_dim) {
  std::size_t in = config.input_dim;
  for (std::size_t w : config.backbone_widths) {
    layers.emplace_back(in, w, rng);
    in = w;
  }
}

Var Backbone::features(Tape& tape, const Var& x) const {
  if (x.value().rank() != 2 || x.value().cols() != input_dim_) {
    throw DimensionError("backbone expects inputs of width " + std::to_string(input_dim_) + ", got " +
                         shape_string(x.shape()));
  }
  Var h = x;
  for (const Dense& layer : layers) h = relu(layer.forward(tape, h));
  return h;
}

void Backbone::set_trainable(bool trainable) {
  visit("", [trainable](const std::string&, Parameter& p) { p.requires_grad = trainable; });
}

DgCode DgForward::row(std::size_t r) const {
  const auto values = code.value().row(r);
  return DgCode{std::vector<double>(values.begin(), values.end()), active.at(r)};
}

Expert::Expert(const EncoderConfig& config, Rng& rng) : k_(config.k()), eps_(config.layer_norm_eps) {
  config.validate();
  std::uniform_real_distribution<double> phase(-std::numbers::pi, std::numbers::pi);
  for (std::size_t m = 0; m < config.grid_units; ++m) {
    Dense unit(config.feature_dim(), config.grid_dim, rng);
    for (double& v : unit.weight.value.data()) v *= config.grid_scale;
    for (double& v : unit.bias.value.data()) v = phase(rng);
    grid.push_back(std::move(unit));
  }
  dg = Dense(config.grid_output_dim(), config.dg_dim, rng);
  dg_norm = NormAffine(config.dg_dim);
  ca3_in = Dense(config.dg_dim, config.ca3_widths[0], rng);
  ca3_out = Dense(config.ca3_widths[0], config.ca3_widths[1], rng);
  ca3_norm = NormAffine(config.ca3_widths[1]);
  std::size_t in = config.integrated_dim();
  for (std::size_t w : config.ca1_widths) {
    ca1.emplace_back(in, w, rng);
    in = w;
  }
  output = Dense(in, config.num_classes, rng);
}

Var Expert::grid_encode(Tape& tape, const Var& features) const {
  Var g;
  for (const Dense& unit : grid) {
    Var gm = sin(unit.forward(tape, features));
    g = g.valid() ? concat_cols(g, gm) : gm;
  }
  return g;
}

DgForward Expert::dg_separate(Tape& tape, const Var& g) const {
  DgForward out;
  out.z = relu(dg.forward(tape, g));
  Var normed = layer_norm(out.z, tape.parameter(dg_norm.gain), tape.parameter(dg_norm.bias), eps_);
  TopK kept = top_k(normed, k_);
  out.code = kept.values;
  out.active = std::move(kept.active);
  return out;
}

Var Expert::ca3_refine(Tape& tape, const Var& code) const {
  Var h = relu(ca3_in.forward(tape, code));
  h = relu(ca3_out.forward(tape, h));
  return layer_norm(h, tape.parameter(ca3_norm.gain), tape.parameter(ca3_norm.bias), eps_);
}

Var Expert::ca1_integrate(Tape&, const Var& code, const Var& completion) const {
  return concat_cols(code, completion);
}

Var Expert::head(Tape& tape, const Var& integrated) const {
  Var h = integrated;
  for (const Dense& layer : ca1) h = relu(layer.forward(tape, h));
  return output.forward(tape, h);
}

DgForward Expert::encode(Tape& tape, const Var& features) const { return dg_separate(tape, grid_encode(tape, features)); }

Var Expert::readout(Tape& tape, const Var& code) const {
  return head(tape, ca1_integrate(tape, code, ca3_refine(tape, code)));
}

ExpertForward Expert::forward(Tape& tape, const Var& features) const {
  ExpertForward out;
  out.grid = grid_encode(tape, features);
  out.dg = dg_separate(tape, out.grid);
  out.completion = ca3_refine(tape, out.dg.code);
  out.integrated = ca1_integrate(tape, out.dg.code, out.completion);
  out.logits = head(tape, out.integrated);
  return out;
}

std::vector<Parameter*> Expert::dg_parameters() { return {&dg.weight, &dg.bias, &dg_norm.gain, &dg_norm.bias}; }

}  // namespace hicl
