// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mvlpt {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::step(double learning_rate) {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter* p = params_[k];
    if (!p->trainable() || !p->has_gradient()) continue;
    auto w = p->mutable_value().data();
    auto g = p->gradient().data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      w[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace mvlpt

namespace mvlpt {

double LrSchedule::at(std::size_t step) const {
  if (step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double span = double(total_steps - warmup_steps);
  const double progress = double(step - warmup_steps) / span;
  return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace mvlpt
