// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "changedet/rng.hpp"

namespace changedet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Scoped autograd off-switch for inference/eval paths.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

inline bool grad_enabled() { return detail::grad_mode(); }

// One node of the recorded computation. Nodes form the tape implicitly:
// `seq` is the creation order, `parents` are the inputs, and `backward_fn`
// pulls this node's grad into the parents' grads. Values are immutable after
// construction; only the grad slot mutates.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward (or an accumulation) touches it
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape) {
    return from_data(shape, std::vector<T>(shape_numel(shape), T(0)));
  }
  static Tensor full(const Shape& shape, T value) {
    return from_data(shape, std::vector<T>(shape_numel(shape), value));
  }
  static Tensor from_data(const Shape& shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data = std::move(data);
    return Tensor(node);
  }
  static Tensor randn(const Shape& shape, Rng& rng, T stddev = T(1)) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
    return from_data(shape, std::move(d));
  }
  static Tensor uniform(const Shape& shape, Rng& rng, T lo, T hi) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
    return from_data(shape, std::move(d));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  int64_t dim(int i) const { return node_->shape[i]; }

  const std::vector<T>& values() const { return node_->data; }
  // In-place access for leaf construction and the optimizer; never call on a
  // tensor that is already part of a recorded graph.
  std::vector<T>& values_mut() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty())
      throw std::logic_error("tensor: grad accessed before backward");
    return node_->grad;
  }
  std::vector<T>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Value copy detached from any recorded graph.
  Tensor detach() const { return from_data(node_->shape, node_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(node_->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>::from_data(node_->shape, std::move(d));
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds an op result node. Records graph structure only when grad mode is on
// and at least one input requires grad; otherwise the result is a plain leaf.
template <typename T>
Tensor<T> make_op(const Shape& shape, std::vector<T> data,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  auto out = Tensor<T>::from_data(shape, std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->seq = ++detail::node_counter();
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) node->parents.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  return out;
}

// Accumulates `g` into the parent's grad slot when that parent participates in
// the graph.
template <typename T>
inline void accumulate_grad(const std::shared_ptr<TensorNode<T>>& parent,
                            int64_t index, T g) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  parent->grad[index] += g;
}

// Reverse sweep from a scalar loss. Visits every reachable recorded node
// exactly once, in reverse creation order, accumulating grads into leaves.
// Repeated calls without zeroing accumulate, by contract.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<std::shared_ptr<TensorNode<T>>> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::shared_ptr<TensorNode<T>>> stack{root};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->backward_fn) order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && !seen.count(p.get())) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto& n : order) {
    n->ensure_grad();  // a node may have received no downstream gradient
    n->backward_fn(*n);
  }
}

}  // namespace changedet
