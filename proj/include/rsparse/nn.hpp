// SPDX-License-Identifier: Apache-2.0
//
// Parameter blocks and layer forwards: linear, layer norm, softmax and
// multi-head attention. Each forward has a graph form (used for training)
// and a tensor form that evaluates on a throwaway no-grad graph.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "rsparse/ops.hpp"

namespace rsparse {

/// Uniform Xavier/Glorot fill of a [out, in] tensor: U(-a, a), a = sqrt(6 / (in + out)).
template <class T>
void xavier_fill(Tensor<T>& t, std::mt19937_64& rng) {
  if (t.rank() != 2) throw ShapeError("xavier_init: expected a 2-D shape, got " + shape_str(t.shape()));
  const double bound = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

template <class T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<T> t(shape);
  xavier_fill(t, rng);
  return t;
}

template <class T>
struct LinearParams {
  Parameter<T> weight;  // [out, in]
  Parameter<T> bias;    // [out]

  LinearParams() = default;
  LinearParams(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight(name + ".weight", Tensor<T>(Shape{out, in})), bias(name + ".bias", Tensor<T>(Shape{out})) {
    xavier_fill(weight.value, rng);
  }
  std::size_t in() const { return weight.value.dim(1); }
  std::size_t out() const { return weight.value.dim(0); }

  template <class F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
  template <class F>
  void visit(F&& f) const {
    f(weight);
    f(bias);
  }
};

template <class T>
struct NormParams {
  Parameter<T> gamma;
  Parameter<T> beta;

  NormParams() = default;
  NormParams(const std::string& name, std::size_t c)
      : gamma(name + ".gamma", Tensor<T>(Shape{c}, T(1))), beta(name + ".beta", Tensor<T>(Shape{c})) {}

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
  template <class F>
  void visit(F&& f) const {
    f(gamma);
    f(beta);
  }
};

/// Multi-head attention weights. Rows h*dk..(h+1)*dk of w_q/w_k/w_v are the
/// per-head projections; w_o maps the concatenated heads back to C.
template <class T>
struct AttentionParams {
  std::size_t num_heads = 1;
  Parameter<T> w_q, w_k, w_v, w_o;  // each [C, C]

  AttentionParams() = default;
  AttentionParams(const std::string& name, std::size_t c, std::size_t heads, std::mt19937_64& rng)
      : num_heads(heads),
        w_q(name + ".w_q", Tensor<T>(Shape{c, c})),
        w_k(name + ".w_k", Tensor<T>(Shape{c, c})),
        w_v(name + ".w_v", Tensor<T>(Shape{c, c})),
        w_o(name + ".w_o", Tensor<T>(Shape{c, c})) {
    if (heads == 0 || c % heads != 0) throw ShapeError("attention: channels not divisible by heads");
    visit([&](Parameter<T>& p) { xavier_fill(p.value, rng); });
  }
  std::size_t channels() const { return w_q.value.dim(1); }
  std::size_t head_dim() const { return channels() / num_heads; }

  template <class F>
  void visit(F&& f) {
    f(w_q);
    f(w_k);
    f(w_v);
    f(w_o);
  }
  template <class F>
  void visit(F&& f) const {
    f(w_q);
    f(w_k);
    f(w_v);
    f(w_o);
  }
};

namespace nn {

template <class T>
Var<T> linear(Graph<T>& g, const LinearParams<T>& p, Var<T> x) {
  return ag::linear(x, g.param(p.weight), std::optional<Var<T>>(g.param(p.bias)));
}

template <class T>
Var<T> layer_norm(Graph<T>& g, const NormParams<T>& p, Var<T> x) {
  return ag::layer_norm(x, g.param(p.gamma), g.param(p.beta));
}

/// softmax(Q K^T / sqrt(dk)) V per head, heads concatenated and projected.
template <class T>
Var<T> attention(Graph<T>& g, const AttentionParams<T>& p, Var<T> q_in, Var<T> k_in, Var<T> v_in) {
  const std::size_t c = p.channels();
  for (Var<T> v : {q_in, k_in, v_in})
    if (v.value().rank() != 2 || v.value().dim(1) != c)
      throw ShapeError("attention: expected [tokens, " + std::to_string(c) + "] inputs, got " +
                       shape_str(v.shape()));
  if (k_in.value().dim(0) != v_in.value().dim(0)) throw ShapeError("attention: key/value count mismatch");
  const std::size_t h = p.num_heads;
  auto q = ag::split_heads(ag::linear(q_in, g.param(p.w_q)), h);
  auto k = ag::split_heads(ag::linear(k_in, g.param(p.w_k)), h);
  auto v = ag::split_heads(ag::linear(v_in, g.param(p.w_v)), h);
  auto scores = ag::scale(ag::bmm(q, k, /*transpose_b=*/true), T(1.0 / std::sqrt(double(p.head_dim()))));
  auto ctx = ag::bmm(ag::softmax(scores), v);
  return ag::linear(ag::merge_heads(ctx), g.param(p.w_o));
}

}  // namespace nn

template <class T>
Tensor<T> linear_forward(const LinearParams<T>& p, const Tensor<T>& x) {
  Graph<T> g(false);
  return nn::linear(g, p, g.view(x)).value();
}

template <class T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  Graph<T> g(false);
  return ag::layer_norm(g.view(x), g.view(gamma), g.view(beta)).value();
}

/// Softmax along `axis`.
template <class T>
Tensor<T> softmax_forward(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  if (axis + 1 == x.rank()) {
    Graph<T> g(false);
    return ag::softmax(g.view(x)).value();
  }
  // move axis last, apply, move back
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Tensor<T> out(x.shape());
  std::vector<T> buf(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[(o * n + j) * inner + i]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (buf[j] = std::exp(x[(o * n + j) * inner + i] - m));
      for (std::size_t j = 0; j < n; ++j) out[(o * n + j) * inner + i] = buf[j] / z;
    }
  return out;
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const AttentionParams<T>& p) {
  Graph<T> g(false);
  return nn::attention(g, p, g.view(q_in), g.view(k_in), g.view(v_in)).value();
}

}  // namespace rsparse
