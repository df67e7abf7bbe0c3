#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vangogh/tensor.hpp"

namespace vangogh {

// Global switch for graph recording. Inference paths run under NoGradGuard
// so intermediate values are released as soon as they go out of scope.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }
  static void set(bool on) noexcept { flag() = on; }

 private:
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer of this node, allocated on first use; nullptr when the
  // node does not participate in differentiation.
  T* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (!grad.allocated() && value.numel() > 0) grad = Tensor<T>(value.shape());
    return grad.data();
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim() const { return node_->value.dim(); }
  int64_t size(int64_t axis) const { return node_->value.size(axis); }
  int64_t numel() const { return node_->value.numel(); }
  T item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  void zero_grad() {
    if (node_->grad.allocated()) node_->grad.fill(T(0));
  }
  void release_grad() { node_->grad = Tensor<T>(); }

  // Reverse-mode sweep from a scalar root. Leaf gradients accumulate, so
  // several backward calls sum into the same parameter buffers.
  void backward() const {
    require(node_->value.numel() == 1, Errc::shape_mismatch,
            "backward() needs a scalar root, got " + shape_str(node_->value.shape()));
    if (!node_->requires_grad) return;
    node_->grad_buffer()[0] += T(1);

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->inputs.size()) {
        Node<T>* child = n->inputs[idx++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.allocated()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> detach(const Var<T>& x) {
  return Var<T>(x.value(), false);
}

// Builds the result node of an op. The backward closure receives the result
// node; its inputs are available in the same order as `ins`.
template <class T, class Fn>
Var<T> make_op(Tensor<T> out, std::initializer_list<Var<T>> ins, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  bool need = false;
  if (GradMode::enabled()) {
    for (const auto& v : ins) need = need || v.requires_grad();
  }
  if (need) {
    n->requires_grad = true;
    n->inputs.reserve(ins.size());
    for (const auto& v : ins) n->inputs.push_back(v.node());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

template <class T, class Fn>
Var<T> make_op(Tensor<T> out, const std::vector<Var<T>>& ins, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  bool need = false;
  if (GradMode::enabled()) {
    for (const auto& v : ins) need = need || v.requires_grad();
  }
  if (need) {
    n->requires_grad = true;
    n->inputs.reserve(ins.size());
    for (const auto& v : ins) n->inputs.push_back(v.node());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

}  // namespace vangogh
