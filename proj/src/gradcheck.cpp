#include "hicl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hicl {

double central_difference(const std::function<double()>& f, double& entry, double step) {
  const double saved = entry;
  entry = saved + step;
  const double up = f();
  entry = saved - step;
  const double down = f();
  entry = saved;
  return (up - down) / (2.0 * step);
}

GradCheckResult check_gradients(const std::vector<NamedParameter>& params, const std::function<Var(Tape&)>& build,
                                double step, double floor) {
  for (const auto& np : params) np.param->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  auto evaluate = [&build]() {
    Tape tape;
    return build(tape).value().item();
  };

  GradCheckResult result;
  for (const auto& np : params) {
    Parameter& p = *np.param;
    const Tensor analytic = p.grad;
    double max_diff = 0.0, max_mag = floor;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double numeric = central_difference(evaluate, p.value[i], step);
      max_diff = std::max(max_diff, std::fabs(numeric - analytic[i]));
      max_mag = std::max({max_mag, std::fabs(numeric), std::fabs(analytic[i])});
      ++result.entries_checked;
    }
    const double rel = max_diff / max_mag;
    if (result.worst_parameter.empty() || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_parameter = np.name;
    }
  }
  return result;
}

}  // namespace hicl
