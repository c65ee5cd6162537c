// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rsparse/ops.hpp"

namespace rsparse {

struct GradReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::string worst;  // tensor and flat index of the largest relative error
  bool passed(double tol) const { return checked > 0 && max_rel_error <= tol; }
};

struct GradCheckOptions {
  double step = 1e-6;
  // |a - n| / max(|a|, |n|, floor); the floor keeps roundoff on
  // near-zero gradients from reading as a relative error
  double floor = 1e-3;
  std::size_t max_coords = 64;  // per tensor; coordinates sampled beyond this
  std::uint64_t seed = 7;
};

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, const GradCheckOptions& opt, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n > opt.max_coords) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.max_coords);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

inline void record(GradReport& r, double analytic, double numeric, double floor, const std::string& where) {
  const double err = std::abs(analytic - numeric);
  const double rel = err / std::max({std::abs(analytic), std::abs(numeric), floor});
  r.max_abs_error = std::max(r.max_abs_error, err);
  if (rel > r.max_rel_error || r.checked == 0) {
    r.max_rel_error = rel;
    r.worst = where + " analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
  }
  ++r.checked;
}

}  // namespace detail

namespace ag {

/// sum(x * R) for a fixed random R; reduces any output to a scalar whose
/// gradient exercises every element.
template <class T>
Var<T> random_projection(Var<T> x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<T> r(x.shape());
  for (auto& v : r.storage()) v = T(nd(rng));
  return sum(mul(x, x.graph->constant(std::move(r))));
}

}  // namespace ag

/// Checks d loss / d inputs. `fn` maps graph leaves to a scalar Var and must be
/// deterministic.
inline GradReport check_input_grads(
    const std::string& name, std::vector<Tensor<double>> inputs,
    const std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>& fn,
    const GradCheckOptions& opt = {}) {
  GradReport rep;
  rep.name = name;
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g(true);
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.input(t, true));
    auto loss = fn(g, leaves);
    g.backward(loss);
    for (auto v : leaves) analytic.push_back(g.has_grad(v) ? g.grad(v) : Tensor<double>(v.shape()));
  }
  auto eval = [&]() {
    Graph<double> g(false);
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.view(t));
    return fn(g, leaves).value()[0];
  };
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i : detail::pick_coords(inputs[k].size(), opt, rng)) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + opt.step;
      const double fp = eval();
      inputs[k][i] = x0 - opt.step;
      const double fm = eval();
      inputs[k][i] = x0;
      detail::record(rep, analytic[k][i], (fp - fm) / (2 * opt.step), opt.floor,
                     "input " + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  return rep;
}

/// Checks d loss / d parameters. `fn` builds the loss on the given graph from
/// the parameters' current values.
inline GradReport check_parameter_grads(const std::string& name, const std::vector<Parameter<double>*>& params,
                                        const std::function<Var<double>(Graph<double>&)>& fn,
                                        const GradCheckOptions& opt = {}) {
  GradReport rep;
  rep.name = name;
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g(true);
    g.backward(fn(g));
  }
  std::vector<Tensor<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  auto eval = [&]() {
    Graph<double> g(false);
    return fn(g).value()[0];
  };
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k]->value;
    for (std::size_t i : detail::pick_coords(v.size(), opt, rng)) {
      const double x0 = v[i];
      v[i] = x0 + opt.step;
      const double fp = eval();
      v[i] = x0 - opt.step;
      const double fm = eval();
      v[i] = x0;
      detail::record(rep, analytic[k][i], (fp - fm) / (2 * opt.step), opt.floor,
                     params[k]->name + "[" + std::to_string(i) + "]");
    }
  }
  for (auto* p : params) p->zero_grad();
  return rep;
}

}  // namespace rsparse
