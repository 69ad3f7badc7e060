// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/autodiff.hpp"

#include <unordered_set>

#include "mvlpt/errors.hpp"

namespace mvlpt {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

void Node::accumulate(const Array& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  auto dst = grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Array& Node::grad_buffer() {
  if (grad.empty()) grad = Array(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Array value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Parameter::Parameter() : leaf_(std::make_shared<Node>()) {}

Parameter::Parameter(Array value, bool trainable)
    : leaf_(std::make_shared<Node>()), trainable_(trainable) {
  leaf_->value = std::move(value);
  leaf_->requires_grad = trainable_;
}

Parameter::Parameter(const Parameter& other)
    : leaf_(std::make_shared<Node>()),
      trainable_(other.trainable_),
      grad_requested_(other.grad_requested_) {
  leaf_->value = other.leaf_->value;
  leaf_->grad = other.leaf_->grad;
  leaf_->requires_grad = other.leaf_->requires_grad;
}

Parameter& Parameter::operator=(const Parameter& other) {
  if (this != &other) {
    Parameter copy(other);
    *this = std::move(copy);
  }
  return *this;
}

const Array& Parameter::gradient() const {
  if (leaf_->grad.empty()) leaf_->grad = Array(leaf_->value.shape(), 0.0);
  return leaf_->grad;
}

void Parameter::zero_grad() { leaf_->grad = Array(); }

void Parameter::set_trainable(bool trainable) {
  trainable_ = trainable;
  leaf_->requires_grad = trainable_ || grad_requested_;
}

void Parameter::request_grad(bool on) {
  grad_requested_ = on;
  leaf_->requires_grad = trainable_ || grad_requested_;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

Var make_result(Array value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(node));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return Var(std::move(node));
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.node());
  node->backward = std::move(backward);
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; graphs from deep encoders overflow recursion
  // budgets in debug builds otherwise.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Array(loss.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) {
      node->backward(*node);
      // Interior gradients are dead once propagated.
      node->grad = Array();
    }
  }
}

void grad(const Var& loss, std::span<Parameter* const> params) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("grad() needs a scalar loss");
  }
  backward(loss);
  for (Parameter* p : params) {
    if (p == nullptr) throw ContractError("grad() received a null parameter");
  }
}

}  // namespace mvlpt
