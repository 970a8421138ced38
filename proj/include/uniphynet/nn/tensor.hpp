#pragma once

#include "uniphynet/errors.hpp"

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

namespace uniphynet::nn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

namespace detail {
inline thread_local bool grad_mode = true;
}

// Per-thread switch for graph recording; off inside NoGradGuard scopes.
inline bool grad_enabled() { return detail::grad_mode; }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  Vec<T> value;
  Vec<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward;

  Vec<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Vec<T>::Zero(value.size());
    return grad;
  }
};

// Shared handle to a node of the computation graph. Copies alias the same
// storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = Vec<T>::Zero(nn::numel(shape));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Vec<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != nn::numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : Tensor(std::move(shape), Eigen::Map<const Vec<T>>(values.begin(), static_cast<Index>(values.size())),
               requires_grad) {}

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Vec<T>& value() const { return node_->value; }
  Vec<T>& value() { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  const Vec<T>& grad() const { return node_->grad; }
  Vec<T>& grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  Tensor detach() const { return Tensor(shape(), value(), false); }
  Tensor clone() const { return Tensor(shape(), value(), requires_grad()); }

  // Reverse-mode sweep from this (scalar) node.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates an op result. When grad mode is on and any input requires grad, the
// node keeps its inputs and backward closure; otherwise it is a plain value.
template <typename T>
Tensor<T> make_result(Shape shape, Vec<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (auto& in : inputs)
    if (in.defined()) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_string(shape()));
  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  node_->grad_buffer().array() += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
  }
}

// Named trainable tensor.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

}  // namespace uniphynet::nn
