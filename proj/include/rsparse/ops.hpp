// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives recorded on a Graph.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "rsparse/autograd.hpp"

namespace rsparse::ag {

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  VecMap<T>(out.data(), out.size()) += CVecMap<T>(b.value().data(), out.size());
  return a.graph->make(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    for (Var<T> p : {a, b}) {
      if (!p.requires_grad()) continue;
      auto& gp = g->grad(p);
      VecMap<T>(gp.data(), gp.size()) += CVecMap<T>(go.data(), go.size());
    }
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.graph->make(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    if (a.requires_grad()) {
      auto& ga = g->grad(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = g->grad(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.graph->make(std::move(out), a.requires_grad(), [a, s](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& ga = g->grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * go[i];
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  return a.graph->make(std::move(out), a.requires_grad(), [a](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    const auto& y = self.value();
    auto& ga = g->grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (y[i] > T(0)) ga[i] += go[i];
  });
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return a.graph->make(Tensor<T>(Shape{}, s), a.requires_grad(), [a](Var<T> self) {
    auto* g = self.graph;
    const T go = g->grad(self)[0];
    auto& ga = g->grad(a);
    for (auto& v : ga.storage()) v += go;
  });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->make(std::move(out), a.requires_grad(), [a](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& ga = g->grad(a);
    VecMap<T>(ga.data(), ga.size()) += CVecMap<T>(go.data(), go.size());
  });
}

/// Columns [begin, end) of the last axis.
template <class T>
Var<T> slice_last(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  const std::size_t k = av.last_dim();
  if (begin > end || end > k) throw ShapeError("slice_last: bad range");
  const std::size_t rows = av.rows();
  const std::size_t w = end - begin;
  Shape s = av.shape();
  s.back() = w;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data() + r * k + begin, w, out.data() + r * w);
  return a.graph->make(std::move(out), a.requires_grad(), [a, begin, w, k, rows](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& ga = g->grad(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) ga[r * k + begin + j] += go[r * w + j];
  });
}

/// y = x W^T + b over the last axis of x. W is [out, in]; b is [out] or absent.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b = std::nullopt) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 2) throw ShapeError("linear: weight must be 2-D");
  const std::size_t in = wv.dim(1), outd = wv.dim(0);
  if (xv.last_dim() != in)
    throw ShapeError("linear: input last axis " + std::to_string(xv.last_dim()) +
                     " != weight in " + std::to_string(in));
  if (b && b->value().size() != outd) throw ShapeError("linear: bias size mismatch");
  const std::size_t rows = xv.rows();
  Shape s = xv.shape();
  if (s.empty()) s = {1};
  s.back() = outd;
  Tensor<T> out(s);
  auto Y = as_matrix(out, rows, outd);
  Y.noalias() = as_matrix(xv, rows, in) * as_matrix(wv, outd, in).transpose();
  if (b) Y.rowwise() += as_matrix(b->value(), 1, outd).row(0);
  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  return x.graph->make(std::move(out), rg, [x, w, b, rows, in, outd](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto dY = as_matrix(go, rows, outd);
    if (x.requires_grad()) {
      auto& gx = g->grad(x);
      as_matrix(gx, rows, in).noalias() += dY * as_matrix(w.value(), outd, in);
    }
    if (w.requires_grad()) {
      auto& gw = g->grad(w);
      as_matrix(gw, outd, in).noalias() += dY.transpose() * as_matrix(x.value(), rows, in);
    }
    if (b && b->requires_grad()) {
      auto& gb = g->grad(*b);
      as_matrix(gb, 1, outd).row(0) += dY.colwise().sum();
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies gamma and beta.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(kLayerNormEps)) {
  const auto& xv = x.value();
  const std::size_t c = xv.last_dim();
  if (c == 0) throw ShapeError("layer_norm: empty last axis");
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("layer_norm: gamma/beta size mismatch");
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    T* hr = xhat->data() + r * c;
    T* yr = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mean) * rs;
      yr[j] = hr[j] * gv[j] + bv[j];
    }
  }
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.graph->make(std::move(out), rg, [x, gamma, beta, xhat, rstd, rows, c](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    if (gamma.requires_grad()) {
      auto& gg = g->grad(gamma);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gg[j] += go[r * c + j] * (*xhat)[r * c + j];
    }
    if (beta.requires_grad()) {
      auto& gb = g->grad(beta);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += go[r * c + j];
    }
    if (x.requires_grad()) {
      auto& gx = g->grad(x);
      const T* gv = gamma.value().data();
      std::vector<T> dh(c);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* hr = xhat->data() + r * c;
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
          dh[j] = go[r * c + j] * gv[j];
          m1 += dh[j];
          m2 += dh[j] * hr[j];
        }
        m1 /= T(c);
        m2 /= T(c);
        const T rs = (*rstd)[r];
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += rs * (dh[j] - m1 - hr[j] * m2);
      }
    }
  });
}

/// Numerically stable softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t c = xv.last_dim();
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T* yr = out.data() + r * c;
    const T m = *std::max_element(xr, xr + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  return x.graph->make(std::move(out), x.requires_grad(), [x, rows, c](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    const auto& y = self.value();
    auto& gx = g->grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += go[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (go[r * c + j] - dot);
    }
  });
}

/// Batched product: [b, m, k] x [b, k, n] -> [b, m, n]. With `transpose_b`,
/// the second operand is [b, n, k] and used transposed.
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    throw ShapeError("bmm: expected matching rank-3 batches, got " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if ((transpose_b ? bv.dim(2) : bv.dim(1)) != k) throw ShapeError("bmm: inner extent mismatch");
  Tensor<T> out(Shape{nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    auto A = CMapR<T>(av.data() + i * m * k, m, k);
    auto C = MapR<T>(out.data() + i * m * n, m, n);
    if (transpose_b)
      C.noalias() = A * CMapR<T>(bv.data() + i * n * k, n, k).transpose();
    else
      C.noalias() = A * CMapR<T>(bv.data() + i * k * n, k, n);
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.graph->make(std::move(out), rg, [a, b, nb, m, k, n, transpose_b](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T>* ga = a.requires_grad() ? &g->grad(a) : nullptr;
    Tensor<T>* gb = b.requires_grad() ? &g->grad(b) : nullptr;
    for (std::size_t i = 0; i < nb; ++i) {
      auto dC = CMapR<T>(go.data() + i * m * n, m, n);
      auto A = CMapR<T>(av.data() + i * m * k, m, k);
      if (transpose_b) {
        auto B = CMapR<T>(bv.data() + i * n * k, n, k);
        if (ga) MapR<T>(ga->data() + i * m * k, m, k).noalias() += dC * B;
        if (gb) MapR<T>(gb->data() + i * n * k, n, k).noalias() += dC.transpose() * A;
      } else {
        auto B = CMapR<T>(bv.data() + i * k * n, k, n);
        if (ga) MapR<T>(ga->data() + i * m * k, m, k).noalias() += dC * B.transpose();
        if (gb) MapR<T>(gb->data() + i * k * n, k, n).noalias() += A.transpose() * dC;
      }
    }
  });
}

/// [N, h*dk] -> [h, N, dk].
template <class T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || heads == 0 || xv.dim(1) % heads != 0)
    throw ShapeError("split_heads: width not divisible by head count");
  const std::size_t n = xv.dim(0), c = xv.dim(1), dk = c / heads;
  Tensor<T> out(Shape{heads, n, dk});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(xv.data() + i * c + h * dk, dk, out.data() + (h * n + i) * dk);
  return x.graph->make(std::move(out), x.requires_grad(), [x, heads, n, c, dk](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dk; ++j) gx[i * c + h * dk + j] += go[(h * n + i) * dk + j];
  });
}

/// [h, N, dk] -> [N, h*dk].
template <class T>
Var<T> merge_heads(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("merge_heads: expected rank 3");
  const std::size_t heads = xv.dim(0), n = xv.dim(1), dk = xv.dim(2), c = heads * dk;
  Tensor<T> out(Shape{n, c});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(xv.data() + (h * n + i) * dk, dk, out.data() + i * c + h * dk);
  return x.graph->make(std::move(out), x.requires_grad(), [x, heads, n, c, dk](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dk; ++j) gx[(h * n + i) * dk + j] += go[i * c + h * dk + j];
  });
}

/// Inverted dropout; identity outside training mode.
template <class T>
Var<T> dropout(Var<T> x, double rate, const ForwardContext& ctx) {
  if (!ctx.training() || rate <= 0.0) return x;
  if (ctx.rng == nullptr) throw Error("dropout: training mode requires an rng");
  const auto& xv = x.value();
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = keep(*ctx.rng) ? s : T(0);
    out[i] = xv[i] * (*mask)[i];
  }
  return x.graph->make(std::move(out), x.requires_grad(), [x, mask](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * (*mask)[i];
  });
}

/// Rows idx of a [R, K] tensor.
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> idx) {
  const auto& xv = x.value();
  const std::size_t k = xv.last_dim();
  Tensor<T> out(Shape{idx.size(), k});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data() + idx[r] * k, k, out.data() + r * k);
  }
  return x.graph->make(std::move(out), x.requires_grad(), [x, idx = std::move(idx), k](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < k; ++j) gx[idx[r] * k + j] += go[r * k + j];
  });
}

/// out[n] = M * X[n] for a fixed [P, Q] matrix M and X of shape [N, Q, C].
template <class T>
Var<T> const_left_matmul(const Tensor<T>& m, Var<T> x) {
  const auto& xv = x.value();
  if (m.rank() != 2 || xv.rank() != 3 || xv.dim(1) != m.dim(1))
    throw ShapeError("const_left_matmul: shape mismatch");
  const std::size_t n = xv.dim(0), p = m.dim(0), q = m.dim(1), c = xv.dim(2);
  Tensor<T> out(Shape{n, p, c});
  auto M = std::make_shared<Tensor<T>>(m);
  for (std::size_t i = 0; i < n; ++i)
    MapR<T>(out.data() + i * p * c, p, c).noalias() =
        as_matrix(*M, p, q) * CMapR<T>(xv.data() + i * q * c, q, c);
  return x.graph->make(std::move(out), x.requires_grad(), [x, M, n, p, q, c](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    for (std::size_t i = 0; i < n; ++i)
      MapR<T>(gx.data() + i * q * c, q, c).noalias() +=
          as_matrix(*M, p, q).transpose() * CMapR<T>(go.data() + i * p * c, p, c);
  });
}

/// Entries of axis 1 of a rank-3 tensor picked by an index list.
template <class T>
Var<T> select_axis1(Var<T> x, std::vector<std::size_t> idx) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("select_axis1: expected rank 3");
  const std::size_t n = xv.dim(0), q = xv.dim(1), c = xv.dim(2), p = idx.size();
  Tensor<T> out(Shape{n, p, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < p; ++r)
      std::copy_n(xv.data() + (i * q + idx[r]) * c, c, out.data() + (i * p + r) * c);
  return x.graph->make(std::move(out), x.requires_grad(), [x, idx = std::move(idx), n, q, c](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    auto& gx = g->grad(x);
    const std::size_t p = idx.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[(i * q + idx[r]) * c + j] += go[(i * p + r) * c + j];
  });
}

}  // namespace rsparse::ag
