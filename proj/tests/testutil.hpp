// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "biva/autodiff.hpp"

namespace biva::test {

/// Central finite-difference check of d(loss)/d(param) for every entry of
/// every trainable parameter. `loss` must rebuild the full forward pass from
/// current parameter values (and must be deterministic across calls).
/// Returns the worst relative error; reference scale guards tiny gradients.
inline double finite_difference_check(
    ParamStore<double>& params, const std::function<double()>& loss_value,
    const std::function<void()>& compute_grads, double h = 1e-5) {
  compute_grads();
  // Snapshot analytic gradients.
  std::vector<std::vector<double>> analytic;
  for (auto& p : params.items()) analytic.push_back(p->grad.to_vector());

  double worst = 0.0;
  size_t pi = 0;
  for (auto& p : params.items()) {
    if (!p->trainable) {
      ++pi;
      continue;
    }
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = loss_value();
      p->value[i] = orig - h;
      const double fm = loss_value();
      p->value[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic[pi][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
    ++pi;
  }
  return worst;
}

}  // namespace biva::test
