// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mvlpt/errors.hpp"

namespace mvlpt {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0;
  double na = 0.0;
  double nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

GradCheckResult check_gradients(const std::function<Var()>& loss_fn,
                                std::span<Parameter* const> params,
                                const GradCheckOptions& options) {
  for (Parameter* p : params) {
    p->request_grad(true);
    p->zero_grad();
  }
  const Var loss = loss_fn();
  backward(loss);

  GradCheckResult result;
  for (Parameter* p : params) {
    const Array analytic_full = p->gradient();
    const std::size_t n = p->size();
    const std::size_t probes = options.max_entries == 0 ? n : std::min(n, options.max_entries);
    const std::size_t stride = std::max<std::size_t>(1, n / probes);

    std::vector<double> analytic;
    std::vector<double> numeric;
    NoGradGuard no_grad;
    for (std::size_t k = 0, idx = 0; k < probes && idx < n; ++k, idx += stride) {
      double& x = p->mutable_value()[idx];
      const double saved = x;
      x = saved + options.step;
      const double up = loss_fn().value().item();
      x = saved - options.step;
      const double down = loss_fn().value().item();
      x = saved;
      analytic.push_back(analytic_full[idx]);
      numeric.push_back((up - down) / (2.0 * options.step));
    }
    const double err = relative_error(analytic, numeric);
    result.per_parameter.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
    result.entries_checked += analytic.size();
  }
  for (Parameter* p : params) {
    p->zero_grad();
    p->request_grad(false);
  }
  return result;
}

}  // namespace mvlpt
