// SPDX-License-Identifier: Apache-2.0
//
// Tape-free reverse-mode differentiation. Every differentiable op returns a
// Var whose node remembers its inputs and a closure that pushes the node's
// gradient back into them. Nodes that do not depend on any gradient-requiring
// leaf carry no closure and no input references, so frozen sub-graphs cost
// nothing beyond the forward computation.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvlpt/array.hpp"

namespace mvlpt {

struct Node {
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Adds `g` into this node's gradient, allocating on first use.
  void accumulate(const Array& g);
  Array& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  // Constant: never requires a gradient.
  static Var constant(Array value);

  const Array& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Learnable (or frozen) leaf. Copies are deep: a copied Parameter owns its own
// value and gradient, so snapshots never alias the live state.
class Parameter {
 public:
  Parameter();
  explicit Parameter(Array value, bool trainable = true);
  Parameter(const Parameter& other);
  Parameter& operator=(const Parameter& other);
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;
  ~Parameter() = default;

  const Array& value() const { return leaf_->value; }
  Array& mutable_value() { return leaf_->value; }
  const Array& gradient() const;
  bool has_gradient() const { return !leaf_->grad.empty(); }
  void zero_grad();

  bool trainable() const noexcept { return trainable_; }
  void set_trainable(bool trainable);

  // Lets gradient checks differentiate through a frozen parameter without
  // making it trainable for the optimizer.
  void request_grad(bool on);

  Var var() const { return Var(leaf_); }
  const Shape& shape() const { return leaf_->value.shape(); }
  std::size_t size() const { return leaf_->value.size(); }

 private:
  std::shared_ptr<Node> leaf_;
  bool trainable_ = true;
  bool grad_requested_ = false;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Builds the node for an op result. When recording is on and any input needs
// a gradient, `backward` is attached and the inputs are retained.
Var make_result(Array value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Reverse pass from a scalar loss; gradients accumulate on every leaf that
// requires one.
void backward(const Var& loss);

// Reverse pass restricted in intent to `params`: validates the loss is a
// scalar and that each parameter is reachable, then accumulates.
void grad(const Var& loss, std::span<Parameter* const> params);

}  // namespace mvlpt
