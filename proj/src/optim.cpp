#include "hicl/optim.hpp"

#include <cmath>

namespace hicl {

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamConfig& config) {
  if (!param.same_shape(grad)) {
    throw DimensionError("adam_step: gradient " + shape_string(grad.shape()) + " vs parameter " +
                         shape_string(param.shape()));
  }
  if (state.step == 0 && !state.m.same_shape(param)) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  }
  if (!state.m.same_shape(param) || !state.v.same_shape(param)) {
    throw DimensionError("adam_step: moment shapes do not match parameter " + shape_string(param.shape()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
  }
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), states_(params_.size()), config_(config) {}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i]->requires_grad) continue;
    adam_step(params_[i]->value, params_[i]->grad, states_[i], config_);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace hicl
