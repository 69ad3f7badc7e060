// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mvlpt/autodiff.hpp"

namespace mvlpt {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters that are not trainable are skipped
// even when a gradient was requested on them.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options = {});

  void step(double learning_rate);
  void zero_grad();
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

}  // namespace mvlpt

namespace mvlpt {

// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
// `total_steps`.
struct LrSchedule {
  double base_lr = 2e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const;
};

}  // namespace mvlpt
