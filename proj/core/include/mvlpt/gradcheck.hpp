// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mvlpt/autodiff.hpp"

namespace mvlpt {

struct GradCheckOptions {
  double step = 1e-5;
  // Entries probed per parameter; 0 probes all of them. Large tensors are
  // sampled at an even stride.
  std::size_t max_entries = 0;
};

struct GradCheckResult {
  // Worst over parameters of |analytic - numeric| / max(|analytic|, |numeric|),
  // norms taken over the probed entries.
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::vector<double> per_parameter;
};

// Compares reverse-mode gradients of `loss_fn` against central differences.
// `loss_fn` must rebuild the scalar loss from the parameters' current values.
GradCheckResult check_gradients(const std::function<Var()>& loss_fn,
                                std::span<Parameter* const> params,
                                const GradCheckOptions& options = {});

double relative_error(std::span<const double> analytic, std::span<const double> numeric);

}  // namespace mvlpt
