#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eyeseg/error.hpp"

namespace eyeseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the dynamic graph. Leaves have no inputs and no backward
// rule; op results keep their inputs alive until the result is released.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward;
  std::size_t backward_visits = 0;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major double tensor. Copies share storage (handle semantics);
// use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    Tensor t(std::move(shape));
    t.node_->value = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t ndim() const { return node().shape.size(); }
  std::size_t size() const { return node().value.size(); }

  std::span<double> data() { return node().value; }
  std::span<const double> data() const { return node().value; }
  std::vector<double> to_vector() const { return node().value; }
  double operator[](std::size_t i) const { return node().value[i]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node().value[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (!node().is_leaf) throw StateError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node().is_leaf; }
  std::string_view op() const { return node().op; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Same values, no history.
  Tensor detach() const { return from(shape(), node().value); }
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node().requires_grad && node().is_leaf;
    return t;
  }

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  detail::Node& node() const {
    if (!node_) throw StateError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(const Tensor& t, std::string_view where) {
  if (!all_finite(t.data())) {
    throw NonFiniteError("non-finite value in " + std::string(where));
  }
}

namespace detail {

// Builds an op result. The graph is recorded only when grad mode is on and
// at least one input participates.
inline Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  node->is_leaf = !needs;
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

// Gradient buffer of input i, or nullptr when that input does not need one.
inline double* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

}  // namespace detail

// Reverse topological record of every graph node reachable from a root that
// participates in differentiation.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node_ptr()) {
    if (!root_) throw StateError("backward on an undefined tensor");
    // Iterative post-order DFS; order_ ends with the root.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    if (root_->requires_grad) {
      stack.emplace_back(root_.get(), 0);
      seen.insert(root_.get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  // Seeds d(root)/d(root) = 1 and runs every backward rule once, root first.
  // Intermediate gradients are recomputed; leaf gradients accumulate.
  void run() {
    if (root_->value.size() != 1) {
      throw StateError("backward requires a scalar loss, got shape " + to_string(root_->shape));
    }
    if (!root_->requires_grad) {
      throw StateError("loss is not connected to any tensor that requires grad");
    }
    for (detail::Node* n : order_) {
      if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
    }
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      ++n->backward_visits;
      if (n->backward) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& loss) {
  Tape tape(loss);
  tape.run();
}

}  // namespace eyeseg
