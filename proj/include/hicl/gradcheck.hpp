#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hicl/autograd.hpp"

namespace hicl {

struct NamedParameter {
  std::string name;
  Parameter* param;
};

struct GradCheckResult {
  /// Worst per-tensor error: max |analytic - numeric| over the tensor, divided by
  /// max(max|analytic|, max|numeric|, floor).
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t entries_checked = 0;
};

/// Compares tape gradients against central finite differences. `build` must
/// construct the scalar loss on the tape it is given and be a pure function of
/// the parameter values.
GradCheckResult check_gradients(const std::vector<NamedParameter>& params,
                                const std::function<Var(Tape&)>& build, double step = 1e-5,
                                double floor = 1e-6);

/// Central difference of a scalar function of one parameter entry.
double central_difference(const std::function<double()>& f, double& entry, double step);

}  // namespace hicl
