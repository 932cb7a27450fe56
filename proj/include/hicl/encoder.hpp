#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "hicl/autograd.hpp"
#include "hicl/rng.hpp"

namespace hicl {

struct EncoderConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> backbone_widths{64};
  std::size_t grid_units = 4;  // M parallel sinusoidal maps
  std::size_t grid_dim = 16;   // output width of each grid unit
  /// Multiplier on the grid weights' init range; larger values give higher spatial frequency.
  double grid_scale = 1.0;
  std::size_t dg_dim = 1024;
  double sparsity_rho = 0.05;
  std::array<std::size_t, 2> ca3_widths{512, 256};
  std::array<std::size_t, 3> ca1_widths{512, 256, 128};
  std::size_t num_classes = 2;  // logits per expert head
  double layer_norm_eps = 1e-5;

  /// Number of DG units kept per code: floor(rho * dg_dim).
  std::size_t k() const;
  std::size_t feature_dim() const { return backbone_widths.empty() ? input_dim : backbone_widths.back(); }
  std::size_t grid_output_dim() const { return grid_units * grid_dim; }
  std::size_t integrated_dim() const { return dg_dim + ca3_widths[1]; }

  /// Throws ConfigError on any invariant violation.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Affine layer y = x·W + b, W stored [in x out].
struct Dense {
  Parameter weight;
  Parameter bias;

  Dense() = default;
  /// Glorot-uniform weights, zero bias.
  Dense(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in_dim() const { return weight.value.shape()[0]; }
  std::size_t out_dim() const { return weight.value.shape()[1]; }
  Var forward(Tape& tape, const Var& x) const;
};

/// Learnable LayerNorm affine, gain 1 and bias 0 at init.
struct NormAffine {
  Parameter gain;
  Parameter bias;

  NormAffine() = default;
  explicit NormAffine(std::size_t dim);
};

/// Shared dense feature extractor standing in for the convolutional trunk.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const EncoderConfig& config, Rng& rng);

  /// f = ReLU-activated dense stack; identity when no widths are configured.
  Var features(Tape& tape, const Var& x) const;

  /// Calls fn(name, param) for every parameter, in a fixed order.
  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    visit_impl(*this, prefix, fn);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& fn) const {
    visit_impl(*this, prefix, fn);
  }
  void set_trainable(bool trainable);

  std::vector<Dense> layers;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, const std::string& prefix, F& fn) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      fn(prefix + "layer" + std::to_string(i) + ".weight", self.layers[i].weight);
      fn(prefix + "layer" + std::to_string(i) + ".bias", self.layers[i].bias);
    }
  }

  std::size_t input_dim_ = 0;
};

/// Sparse separation code of a single input.
struct DgCode {
  std::vector<double> values;
  /// Ascending indices of the k kept units.
  std::vector<std::size_t> active_set;
};

/// Batched DG stage output.
struct DgForward {
  Var z;     // ReLU(W_DG g + b_DG), pre-normalization
  Var code;  // TopK(LayerNorm(z), k)
  std::vector<std::vector<std::size_t>> active;

  DgCode row(std::size_t r) const;
};

struct ExpertForward {
  Var grid;
  DgForward dg;
  Var completion;  // CA3 output
  Var integrated;  // [code ; completion]
  Var logits;
};

/// One expert's DG -> CA3 -> CA1 -> head stack, including its grid encoder.
class Expert {
 public:
  Expert() = default;
  Expert(const EncoderConfig& config, Rng& rng);

  /// g = [sin(W_1 f + phi_1); ...; sin(W_M f + phi_M)].
  Var grid_encode(Tape& tape, const Var& features) const;
  DgForward dg_separate(Tape& tape, const Var& grid) const;
  /// LayerNorm(ReLU(W_2 ReLU(W_1 p + b_1) + b_2)).
  Var ca3_refine(Tape& tape, const Var& code) const;
  Var ca1_integrate(Tape& tape, const Var& code, const Var& completion) const;
  /// CA1 dense stack followed by the linear class head.
  Var head(Tape& tape, const Var& integrated) const;

  /// Grid and DG stages only: what routing needs.
  DgForward encode(Tape& tape, const Var& features) const;
  /// CA3, CA1 and head on an existing code.
  Var readout(Tape& tape, const Var& code) const;
  ExpertForward forward(Tape& tape, const Var& features) const;

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    visit_impl(*this, prefix, fn);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& fn) const {
    visit_impl(*this, prefix, fn);
  }
  /// The parameters of the DG stage: projection and its LayerNorm affine.
  std::vector<Parameter*> dg_parameters();

  std::vector<Dense> grid;
  Dense dg;
  NormAffine dg_norm;
  Dense ca3_in;
  Dense ca3_out;
  NormAffine ca3_norm;
  std::vector<Dense> ca1;
  Dense output;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, const std::string& prefix, F& fn) {
    for (std::size_t m = 0; m < self.grid.size(); ++m) {
      fn(prefix + "grid" + std::to_string(m) + ".weight", self.grid[m].weight);
      fn(prefix + "grid" + std::to_string(m) + ".phase", self.grid[m].bias);
    }
    fn(prefix + "dg.weight", self.dg.weight);
    fn(prefix + "dg.bias", self.dg.bias);
    fn(prefix + "dg_norm.gain", self.dg_norm.gain);
    fn(prefix + "dg_norm.bias", self.dg_norm.bias);
    fn(prefix + "ca3.0.weight", self.ca3_in.weight);
    fn(prefix + "ca3.0.bias", self.ca3_in.bias);
    fn(prefix + "ca3.1.weight", self.ca3_out.weight);
    fn(prefix + "ca3.1.bias", self.ca3_out.bias);
    fn(prefix + "ca3_norm.gain", self.ca3_norm.gain);
    fn(prefix + "ca3_norm.bias", self.ca3_norm.bias);
    for (std::size_t i = 0; i < self.ca1.size(); ++i) {
      fn(prefix + "ca1." + std::to_string(i) + ".weight", self.ca1[i].weight);
      fn(prefix + "ca1." + std::to_string(i) + ".bias", self.ca1[i].bias);
    }
    fn(prefix + "head.weight", self.output.weight);
    fn(prefix + "head.bias", self.output.bias);
  }

  std::size_t k_ = 1;
  double eps_ = 1e-5;
};

}  // namespace hicl
