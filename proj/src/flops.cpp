#include "hicl/flops.hpp"

#include <cmath>

namespace hicl {

std::uint64_t affine_flops(std::uint64_t in, std::uint64_t out, bool bias) { return 2 * in * out + (bias ? out : 0); }
std::uint64_t layer_norm_flops(std::uint64_t d) { return 8 * d; }
std::uint64_t pointwise_flops(std::uint64_t d) { return d; }
std::uint64_t cosine_flops(std::uint64_t d) { return 6 * d; }

std::uint64_t top_k_flops(std::uint64_t d) {
  if (d < 2) return 0;
  const double dd = static_cast<double>(d);
  return static_cast<std::uint64_t>(std::llround(dd * std::log2(dd)));
}

std::uint64_t FlopsReport::conditional_total() const { return backbone + num_experts * dg + expert_readout() + routing; }

std::uint64_t FlopsReport::dense_total() const { return backbone + num_experts * (dg + expert_readout()) + routing; }

nlohmann::json FlopsReport::to_json() const {
  return nlohmann::json{
      {"convention", "1 multiply-accumulate = 2 FLOPs; comparison = 1; LayerNorm 8d; sin/ReLU d; top-k d*log2(d); cosine 6d"},
      {"backbone", backbone},
      {"per_expert", {{"dg", dg}, {"ca3", ca3}, {"ca1", ca1}, {"head", head}}},
      {"routing", routing},
      {"num_experts", num_experts},
      {"conditional_total", conditional_total()},
      {"dense_total", dense_total()},
      {"conditional_mflops", static_cast<double>(conditional_total()) / 1e6},
      {"dense_mflops", static_cast<double>(dense_total()) / 1e6},
  };
}

FlopsReport count_flops(const ModelConfig& config) {
  config.validate();
  const EncoderConfig& e = config.encoder;
  FlopsReport r;
  r.num_experts = config.num_experts;

  std::uint64_t in = e.input_dim;
  for (std::size_t w : e.backbone_widths) {
    r.backbone += affine_flops(in, w) + pointwise_flops(w);
    in = w;
  }
  const std::uint64_t f = e.feature_dim();

  r.dg = e.grid_units * (affine_flops(f, e.grid_dim) + pointwise_flops(e.grid_dim));
  r.dg += affine_flops(e.grid_output_dim(), e.dg_dim) + pointwise_flops(e.dg_dim) + layer_norm_flops(e.dg_dim) +
          top_k_flops(e.dg_dim);

  r.ca3 = affine_flops(e.dg_dim, e.ca3_widths[0]) + pointwise_flops(e.ca3_widths[0]) +
          affine_flops(e.ca3_widths[0], e.ca3_widths[1]) + pointwise_flops(e.ca3_widths[1]) +
          layer_norm_flops(e.ca3_widths[1]);

  in = e.integrated_dim();
  for (std::size_t w : e.ca1_widths) {
    r.ca1 += affine_flops(in, w) + pointwise_flops(w);
    in = w;
  }
  r.head = affine_flops(in, e.num_classes);
  r.routing = config.num_experts * cosine_flops(e.dg_dim) + config.num_experts;
  return r;
}

}  // namespace hicl
