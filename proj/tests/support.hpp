#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "hicl/autograd.hpp"
#include "hicl/gradcheck.hpp"
#include "hicl/rng.hpp"
#include "hicl/router.hpp"

namespace hicl::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}


/// Moves zero-initialized biases off ReLU kinks before finite differencing.
inline void jitter_biases(const std::vector<NamedParameter>& params, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (const NamedParameter& np : params) {
    if (np.name.ends_with("bias")) {
      for (double& v : np.param->value.data()) v = u(rng);
    }
  }
}

/// Narrow model for fast gradient and protocol tests.
inline ModelConfig small_model(std::size_t experts = 3, std::size_t input_dim = 6) {
  ModelConfig c;
  EncoderConfig& e = c.encoder;
  e.input_dim = input_dim;
  e.backbone_widths = {8};
  e.grid_units = 2;
  e.grid_dim = 4;
  e.dg_dim = 20;
  e.sparsity_rho = 0.25;
  e.ca3_widths = {6, 5};
  e.ca1_widths = {7, 6, 5};
  e.num_classes = 2;
  c.num_experts = experts;
  return c;
}

}  // namespace hicl::test
