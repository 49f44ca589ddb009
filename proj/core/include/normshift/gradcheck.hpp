#pragma once

#include <cstddef>
#include <functional>

#include "normshift/autodiff.hpp"

namespace normshift {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Builds a scalar on the given tape from the input variable.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;
// Builds a scalar that reads some parameter captured by the caller.
using ParamFn = std::function<Var<double>(Tape<double>&)>;

// Compares reverse-mode gradients against central differences with step
// eps * max(1, |x_i|). The error for a coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|); the maximum is returned.
// Throws NumericalError if any evaluation is non-finite.
GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& point, double eps = 1e-4);

// Same check for d f / d param.value; param.grad is restored afterwards.
GradCheckResult grad_check_param(Param<double>& param, const ParamFn& f, double eps = 1e-4);

}  // namespace normshift
