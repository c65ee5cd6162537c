// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records nodes in creation order; backward() walks them in reverse
// and calls each node's closure, which reads the node's gradient and
// accumulates into its parents. Parameters enter as leaves whose value and
// gradient live outside the graph, so a graph can be discarded after each
// training step without copying weights.
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rsparse/tensor.hpp"

namespace rsparse {

/// Trainable tensor with an accumulated gradient of the same shape.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  mutable Tensor<T> grad;  // accumulation buffer, written by Graph::backward

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() const {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph->requires_grad(*this); }
};

template <class T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> t) { return push(std::move(t), {}, false); }

  /// Leaf whose gradient is kept inside the graph (read it with grad()).
  Var<T> input(Tensor<T> t, bool requires_grad = true) {
    return push(std::move(t), {}, requires_grad && grad_enabled_);
  }

  /// Leaf backed by a parameter; gradients accumulate into p.grad.
  Var<T> param(const Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.requires_grad = grad_enabled_;
    if (n.requires_grad) {
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      n.external_grad = &p.grad;
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Read-only leaf referencing an external tensor (no gradient).
  Var<T> view(const Tensor<T>& t) {
    Node n;
    n.external = &t;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op result. `backward` receives the new node's handle and runs
  /// during backward() only if the node requires grad and received a gradient.
  Var<T> make(Tensor<T> value, bool requires_grad, std::function<void(Var<T>)> backward) {
    const bool rg = requires_grad && grad_enabled_;
    return push(std::move(value), rg ? std::move(backward) : std::function<void(Var<T>)>{}, rg);
  }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of v; allocated as zeros on first access.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_[v.id];
    n.has_grad = true;
    if (n.external_grad) return *n.external_grad;
    if (n.grad.size() != value(v).size()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }
  bool has_grad(Var<T> v) const { return nodes_[v.id].has_grad; }

  void backward(Var<T> root, T seed = T(1)) {
    if (value(root).size() != 1) throw ShapeError("backward() requires a scalar root");
    grad(root)[0] += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad) continue;
      n.backward(Var<T>{this, i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* external_grad = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Var<T>)> backward;
  };

  Var<T> push(Tensor<T> t, std::function<void(Var<T>)> bw, bool rg) {
    Node n;
    n.owned = std::move(t);
    n.requires_grad = rg;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

enum class Mode { kTrain, kEval };

/// Per-forward settings: train/eval and the dropout RNG.
struct ForwardContext {
  Mode mode = Mode::kEval;
  std::mt19937_64* rng = nullptr;
  bool training() const { return mode == Mode::kTrain; }
};

namespace ag {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T>
CMapR<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapR<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MapR<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapR<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace ag
}  // namespace rsparse
