// SPDX-License-Identifier: Apache-2.0
//
// One-to-one assignment between predictions (rows) and ground truths (columns).
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "rsparse/tensor.hpp"

namespace rsparse {

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, ground truth), ascending gt
  std::vector<std::size_t> unmatched_predictions;          // ascending
  double total_cost = 0.0;
};

namespace detail {

inline void check_cost(const Tensor<double>& cost) {
  if (cost.rank() != 2) throw ShapeError("matching: cost must be [N, M]");
  for (double v : cost.values())
    if (!std::isfinite(v)) throw Error("matching: non-finite cost entry");
}

/// Sums matched costs in ascending ground-truth order so that equal
/// assignments always produce bitwise-equal totals.
inline MatchResult finish_match(const Tensor<double>& cost, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  std::sort(pairs.begin(), pairs.end(), [](auto a, auto b) { return a.second < b.second; });
  MatchResult r;
  std::vector<bool> used(cost.dim(0), false);
  for (auto [p, t] : pairs) {
    r.total_cost += cost.at(p, t);
    used[p] = true;
  }
  for (std::size_t i = 0; i < cost.dim(0); ++i)
    if (!used[i]) r.unmatched_predictions.push_back(i);
  r.pairs = std::move(pairs);
  return r;
}

}  // namespace detail

/// Minimum-cost assignment (Kuhn-Munkres with potentials, O(n^2 m) for the
/// smaller side n). Matches min(N, M) pairs.
inline MatchResult hungarian_match(const Tensor<double>& cost) {
  detail::check_cost(cost);
  const std::size_t n_pred = cost.dim(0), n_gt = cost.dim(1);
  if (n_pred == 0 || n_gt == 0) return detail::finish_match(cost, {});
  const bool gt_rows = n_gt <= n_pred;
  const std::size_t n = gt_rows ? n_gt : n_pred;  // rows
  const std::size_t m = gt_rows ? n_pred : n_gt;  // columns
  auto a = [&](std::size_t i, std::size_t j) { return gt_rows ? cost.at(j, i) : cost.at(i, j); };

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {  // strict: lowest column index wins ties
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t row = p[j] - 1, col = j - 1;
    pairs.emplace_back(gt_rows ? col : row, gt_rows ? row : col);
  }
  return detail::finish_match(cost, std::move(pairs));
}

inline constexpr std::size_t kBruteForceMaxSide = 8;

/// Exhaustive minimum over all injections of the smaller side into the larger.
/// Candidates are enumerated in lexicographic order and only a strictly lower
/// total replaces the incumbent, so ties resolve to the lowest indices.
inline MatchResult brute_force_match(const Tensor<double>& cost) {
  detail::check_cost(cost);
  const std::size_t n_pred = cost.dim(0), n_gt = cost.dim(1);
  const std::size_t n = std::min(n_pred, n_gt), m = std::max(n_pred, n_gt);
  if (n > kBruteForceMaxSide) throw Error("brute_force_match: smaller side exceeds 8");
  double count = 1;
  for (std::size_t k = 0; k < n; ++k) count *= static_cast<double>(m - k);
  if (count > 5e7) throw Error("brute_force_match: too many candidate assignments");
  if (n == 0) return detail::finish_match(cost, {});
  const bool gt_rows = n_gt <= n_pred;
  auto a = [&](std::size_t i, std::size_t j) { return gt_rows ? cost.at(j, i) : cost.at(i, j); };

  std::vector<std::size_t> pick(n), best;
  std::vector<char> taken(m, 0);
  double best_total = std::numeric_limits<double>::infinity();
  auto rec = [&](auto&& self, std::size_t depth, double acc) -> void {
    if (depth == n) {
      if (acc < best_total) {
        best_total = acc;
        best = pick;
      }
      return;
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (taken[j]) continue;
      taken[j] = 1;
      pick[depth] = j;
      self(self, depth + 1, acc + a(depth, j));
      taken[j] = 0;
    }
  };
  rec(rec, 0, 0.0);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(gt_rows ? best[i] : i, gt_rows ? i : best[i]);
  return detail::finish_match(cost, std::move(pairs));
}

}  // namespace rsparse
