#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dwp/autodiff.hpp"

namespace dwp {

// Central finite-difference check of a scalar function of a parameter set.
// `f` rebuilds the graph from the current parameter values and returns the
// scalar output. Returns max over all coordinates of
// |analytic - central| / max(1, |central|). f64 only.
inline double finite_diff_check(const std::function<Var<double>()>& f,
                                std::vector<Var<double>>& params, double h = 1e-5) {
  if (h < 1e-6 || h > 1e-4) throw std::invalid_argument("finite_diff_check: h outside [1e-6, 1e-4]");
  for (auto& p : params) p.zero_grad();
  Var<double> out = f();
  if (!out.value().all_finite()) throw NumericalError("finite_diff_check: non-finite evaluation");
  backward(out);
  std::vector<Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& val = params[pi].value();
    for (std::int64_t i = 0; i < val.numel(); ++i) {
      const double orig = val[i];
      val[i] = orig + h;
      const double fp = f().item();
      val[i] = orig - h;
      const double fm = f().item();
      val[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericalError("finite_diff_check: non-finite evaluation");
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace dwp
