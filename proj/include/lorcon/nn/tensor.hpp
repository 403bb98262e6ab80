#pragma once

// Dense n-dimensional tensor with tape-free reverse-mode differentiation.
// Each result node keeps its parents and a closure that pushes its gradient
// back to them; backward() runs the closures in reverse topological order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lorcon/errors.hpp"

namespace lorcon::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < s.size(); ++i) ss << (i ? "," : "") << s[i];
  ss << ']';
  return ss.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording in the current scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(nn::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != nn::numel(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  // Gradient storage (allocated as zeros on first access).
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Copy of the values without graph history.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

  // Reverse-mode sweep from a scalar.
  void backward() {
    if (numel() != 1)
      throw ShapeError("backward() requires a scalar, got shape " + to_string(shape()));
    backward_from(std::vector<T>{T(1)});
  }

  // Reverse-mode sweep seeded with an explicit output gradient.
  void backward_from(const std::vector<T>& seed) {
    if (seed.size() != numel()) throw ShapeError("backward: seed size mismatch");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    topo_sort(order);
    auto& g = node_->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  void topo_sort(std::vector<Node<T>*>& order) const {
    std::unordered_set<Node<T>*> visited;
    // Iterative post-order DFS; graphs from unrolled LSTMs can be deep.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

// Result of an op. Records parents and the backward closure only when
// recording is enabled and some input requires a gradient.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs) track = track || (in->defined() && in->requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    for (const Tensor<T>* in : inputs)
      if (in->defined() && in->requires_grad()) node->parents.push_back(in->ptr());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

// Same as above for a variable number of inputs.
template <typename T, typename Backward>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, const char* op,
                        const std::vector<Tensor<T>>& inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs)
      if (in.requires_grad()) node->parents.push_back(in.ptr());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

// Gradient accumulator of an input if it participates, else nullptr.
template <typename T>
T* grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->ensure_grad().data();
}

// Throws NumericalError naming the stage when a value is NaN/Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& stage) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.data()[i])) {
      throw NumericalError("non-finite value at element " + std::to_string(i) + " of " + stage +
                           " output " + to_string(t.shape()));
    }
  }
}

// Records which side of each kink (ReLU sign, pooling argmax) a forward pass
// took. Finite differences are only meaningful when the pattern is unchanged.
class NonSmoothRecorder {
 public:
  NonSmoothRecorder() : prev_(active()) { active() = this; }
  ~NonSmoothRecorder() { active() = prev_; }
  NonSmoothRecorder(const NonSmoothRecorder&) = delete;
  NonSmoothRecorder& operator=(const NonSmoothRecorder&) = delete;

  void mix(std::uint64_t v) {
    hash_ ^= v + 0x9E3779B97F4A7C15ull + (hash_ << 6) + (hash_ >> 2);
  }
  std::uint64_t hash() const { return hash_; }

  static NonSmoothRecorder*& active() {
    thread_local NonSmoothRecorder* r = nullptr;
    return r;
  }

 private:
  NonSmoothRecorder* prev_;
  std::uint64_t hash_ = 0xCBF29CE484222325ull;
};

}  // namespace lorcon::nn
