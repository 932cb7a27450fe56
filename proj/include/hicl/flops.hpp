#pragma once

#include <cstdint>

#include "hicl/router.hpp"

namespace hicl {

// Counting rules: one multiply-accumulate is 2 FLOPs; comparisons count 1.
std::uint64_t affine_flops(std::uint64_t in, std::uint64_t out, bool bias = true);
std::uint64_t layer_norm_flops(std::uint64_t d);
std::uint64_t pointwise_flops(std::uint64_t d);
/// d log2 d, rounded to the nearest integer.
std::uint64_t top_k_flops(std::uint64_t d);
std::uint64_t cosine_flops(std::uint64_t d);

/// Analytic single-input forward cost.
struct FlopsReport {
  std::uint64_t backbone = 0;
  /// One expert's stages. `dg` includes that expert's grid encoder.
  std::uint64_t dg = 0;
  std::uint64_t ca3 = 0;
  std::uint64_t ca1 = 0;
  std::uint64_t head = 0;
  /// N cosine similarities plus the N-way selection.
  std::uint64_t routing = 0;
  std::uint64_t num_experts = 0;

  std::uint64_t expert_readout() const { return ca3 + ca1 + head; }
  /// backbone + N dg + one readout + routing.
  std::uint64_t conditional_total() const;
  /// backbone + N (dg + readout) + routing.
  std::uint64_t dense_total() const;

  nlohmann::json to_json() const;
};

FlopsReport count_flops(const ModelConfig& config);

}  // namespace hicl
