#include "normshift/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace normshift {

namespace {

double eval_scalar(const Var<double>& v) {
  const auto& t = v.value();
  if (t.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(t[0])) throw NumericalError("grad_check: non-finite function value");
  return t[0];
}

template <typename Eval>
GradCheckResult compare(const Tensor<double>& analytic, Tensor<double>& point, double eps, Eval&& eval) {
  if (!(eps > 0)) throw ValidationError("grad_check: eps must be positive");
  if (!analytic.all_finite()) throw NumericalError("grad_check: non-finite analytic gradient");
  GradCheckResult res;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    const double h = eps * std::max(1.0, std::abs(x0));
    point[i] = x0 + h;
    const double fp = eval();
    point[i] = x0 - h;
    const double fm = eval();
    point[i] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (i == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.analytic = a;
      res.numeric = numeric;
    }
  }
  return res;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& point, double eps) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    tape.set_track_params(false);
    auto x = tape.input(point);
    auto y = f(tape, x);
    eval_scalar(y);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  Tensor<double> probe = point;
  return compare(analytic, probe, eps, [&] {
    Tape<double> tape;
    tape.set_track_params(false);
    return eval_scalar(f(tape, tape.constant(probe)));
  });
}

GradCheckResult grad_check_param(Param<double>& param, const ParamFn& f, double eps) {
  const Tensor<double> saved_grad = param.grad;
  param.zero_grad();
  {
    Tape<double> tape;
    auto y = f(tape);
    eval_scalar(y);
    tape.backward(y);
  }
  const Tensor<double> analytic = param.grad;
  param.grad = saved_grad;
  return compare(analytic, param.value, eps, [&] {
    Tape<double> tape;
    tape.set_track_params(false);
    return eval_scalar(f(tape));
  });
}

}  // namespace normshift
