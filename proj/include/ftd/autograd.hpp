#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ftd/tensor.hpp"

namespace ftd {

/// A learnable tensor with its gradient buffer. Frozen parameters
/// (trainable == false) never enter a gradient graph and are never updated.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor<T> v, bool is_trainable = true)
      : value(std::move(v)), grad(value.shape()), trainable(is_trainable) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

template <typename T>
void zero_grad(const std::vector<NamedParam<T>>& params) {
  for (const auto& p : params) p.param->zero_grad();
}

template <typename T>
void set_trainable(const std::vector<NamedParam<T>>& params, bool trainable) {
  for (const auto& p : params) p.param->trainable = trainable;
}

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  Param<T>* sink = nullptr;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

/// Handle to a value in a reverse-mode graph. Values computed only from
/// constants and frozen parameters carry no graph.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Gradient after backward(); zeros if nothing flowed here.
  Tensor<T> grad() const {
    return node_->grad.empty() ? Tensor<T>(node_->value.shape()) : node_->grad;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(Param<T>& p) {
  auto n = std::make_shared<Node<T>>();
  n->value = p.value;
  n->requires_grad = p.trainable;
  if (p.trainable) n->sink = &p;
  return Var<T>(std::move(n));
}

/// Builds an op result. The backward closure is kept only when some parent
/// needs a gradient. Non-finite results raise NumericError naming the op.
template <typename T, typename Fn>
Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> parents, Fn&& backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

/// Reverse sweep from a scalar root. Leaf gradients are added into their
/// Param::grad; callers zero those buffers before each step.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->sink) accumulate(n->sink->grad, n->grad);
  }
}

}  // namespace ftd
