#pragma once

#include <cstddef>
#include <vector>

#include "hicl/tensor.hpp"

namespace hicl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Tensor m;
  Tensor v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of `param` in place.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamConfig& config);

/// Adam over a fixed list of parameters. Frozen parameters (requires_grad false)
/// are skipped and keep their state untouched.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  void step();
  void zero_grad();

  const AdamConfig& config() const noexcept { return config_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> states_;
  AdamConfig config_;
};

}  // namespace hicl
