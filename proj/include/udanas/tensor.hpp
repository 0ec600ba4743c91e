#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Ops (see ops.hpp) create new
// nodes that remember their parents and a backward closure; backward() on a
// scalar walks the recorded graph once in reverse topological order and then
// releases it, so a second call on the same loss is an error. Released
// values stay readable and act as constants in new ops. Leaf parameters
// keep their accumulated gradients until zero_grad().

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "udanas/errors.hpp"

namespace udanas::nn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<Index>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, Array values) {
    return make_leaf(std::move(shape), std::move(values), false);
  }
  static Tensor zeros(Shape shape) {
    const Index n = numel(shape);
    return make_leaf(std::move(shape), Array::Zero(n), false);
  }
  static Tensor full(Shape shape, Scalar v) {
    const Index n = numel(shape);
    return make_leaf(std::move(shape), Array::Constant(n, v), false);
  }
  /// Trainable leaf: gradients accumulate into it across backward passes.
  static Tensor parameter(Shape shape, Array values) {
    return make_leaf(std::move(shape), std::move(values), true);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  /// In-place access for optimizers and EMA; never use on non-leaf nodes mid-graph.
  Array& mutable_value() const { return node_->value; }
  const Scalar* data() const { return node_->value.data(); }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Accumulated gradient; zeros when nothing has flowed in yet.
  Array grad() const { return has_grad() ? node_->grad : Array::Zero(size()); }
  void zero_grad() const { node_->grad.resize(0); }

  /// Same storage viewed with another shape of equal element count. Differentiable.
  Tensor reshape(Shape shape) const;

 private:
  static Tensor make_leaf(Shape shape, Array values, bool requires_grad) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    }
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  NodePtr node_;
};

/// Build an op result. The closure is kept only when some parent needs gradients.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, typename Tensor<Scalar>::Array value,
                           std::vector<Tensor<Scalar>> parents,
                           std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshape(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape()) + " to " + to_string(new_shape));
  }
  return make_result<Scalar>(std::move(new_shape), value(), {*this}, [](Node<Scalar>& out) {
    auto& in = *out.parents[0];
    if (in.requires_grad) in.grad_buffer() += out.grad;
  });
}

/// Reverse-mode sweep from a scalar. Populates grads of every reachable node
/// that requires them, then releases the interior of the graph.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar, got " + to_string(loss.shape()));
  const auto& root = loss.node();
  if (root->released) throw Error("backward called twice on the same graph");
  if (root->is_leaf || !root->requires_grad) {
    throw Error("backward called without a recorded forward graph");
  }

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().setConstant(Scalar(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
  for (Node<Scalar>* node : order) {
    if (node->is_leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.resize(0);
    node->requires_grad = false;  // later ops see it as a constant
    node->released = true;
  }
}

}  // namespace udanas::nn
