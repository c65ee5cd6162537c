// SPDX-License-Identifier: Apache-2.0
//
// Feature pyramid container, rotated RoIAlign and Dual-Context Pooling.
//
// Feature maps are stored channel-last, [H, W, C], so that one bilinear tap
// reads a contiguous channel vector. Pooling is linear in the feature values:
// a rotated RoIAlign call is compiled into a PoolPlan (per output cell, a list
// of (pixel, weight) taps) which drives both the forward gather and the
// backward scatter. Box coordinates are never differentiated.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rsparse/geometry.hpp"
#include "rsparse/ops.hpp"

namespace rsparse {

inline constexpr double kDefaultAlpha = 13.0 / 7.0;
inline constexpr std::size_t kRoiSize = 7;
inline constexpr std::size_t kExtendedRoiSize = 13;
inline constexpr std::size_t kDefaultSamplingRatio = 2;

template <class T>
struct FeatureMap {
  int level = 2;            // pyramid level k, stride = 2^k
  Tensor<T> values;         // [H, W, C]

  int stride() const { return 1 << level; }
  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
};

template <class T>
struct FeaturePyramid {
  std::vector<FeatureMap<T>> levels;  // ascending level order
  int image_width = 0;
  int image_height = 0;

  int min_level() const { return levels.front().level; }
  int max_level() const { return levels.back().level; }
  std::size_t channels() const { return levels.front().channels(); }

  std::size_t index_of(int level) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i].level == level) return i;
    throw ShapeError("pyramid has no level P" + std::to_string(level));
  }
  const FeatureMap<T>& at_level(int level) const { return levels[index_of(level)]; }

  /// Checks strides and that level extents are ceil(image / stride).
  void validate() const {
    if (levels.empty()) throw ShapeError("feature pyramid has no levels");
    const std::size_t c = channels();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& m = levels[i];
      if (m.level < 2 || m.level > 5) throw ShapeError("pyramid level outside P2..P5");
      if (i > 0 && m.level <= levels[i - 1].level) throw ShapeError("pyramid levels not ascending");
      if (m.values.rank() != 3 || m.channels() != c) throw ShapeError("pyramid level channel mismatch");
      const auto s = static_cast<std::size_t>(m.stride());
      const std::size_t hh = (static_cast<std::size_t>(image_height) + s - 1) / s;
      const std::size_t ww = (static_cast<std::size_t>(image_width) + s - 1) / s;
      if (m.height() != hh || m.width() != ww)
        throw ShapeError("pyramid level P" + std::to_string(m.level) + " has extent " +
                         shape_str(m.values.shape()) + ", expected " + std::to_string(hh) + "x" +
                         std::to_string(ww));
    }
  }
};

/// Canonical FPN rule k = floor(4 + log2(sqrt(w*h) / 224)), clamped to the
/// pyramid's levels. Callers pass the box they pool from.
inline int assign_level(const OrientedBox& b, int min_level = 2, int max_level = 5) {
  const double scale = std::sqrt(b.w * b.h);
  const int k = static_cast<int>(std::floor(4.0 + std::log2(scale / 224.0 + 1e-12)));
  return std::clamp(k, min_level, max_level);
}

template <class T>
int assign_pyramid_level(const OrientedBox& b, const FeaturePyramid<T>& pyr) {
  return assign_level(b, pyr.min_level(), pyr.max_level());
}

/// Taps for each output cell of one pooled region.
template <class T>
struct PoolPlan {
  std::size_t level_index = 0;            // index into FeaturePyramid::levels
  std::vector<std::uint32_t> row_start;   // size cells + 1
  std::vector<std::uint32_t> pixel;       // y * W + x
  std::vector<T> weight;

  std::size_t cells() const { return row_start.empty() ? 0 : row_start.size() - 1; }
};

namespace detail {

// Appends the bilinear taps of image point (x, y) with weight `w`. Cell (i, j)
// has its center at ((j + 0.5) * stride, (i + 0.5) * stride). Points outside
// the map extent contribute nothing; points inside but beyond the outermost
// centers are clamped to the border cells.
template <class T>
void add_bilinear_taps(std::size_t height, std::size_t width, int stride, double x, double y, double w,
                       PoolPlan<T>& plan) {
  const double ext_x = static_cast<double>(width) * stride;
  const double ext_y = static_cast<double>(height) * stride;
  if (x < 0 || y < 0 || x > ext_x || y > ext_y) return;
  double u = std::clamp(x / stride - 0.5, 0.0, static_cast<double>(width - 1));
  double v = std::clamp(y / stride - 0.5, 0.0, static_cast<double>(height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(u));
  const auto y0 = static_cast<std::size_t>(std::floor(v));
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const double fx = u - static_cast<double>(x0);
  const double fy = v - static_cast<double>(y0);
  const double ws[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
  const std::size_t px[4] = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
  for (int k = 0; k < 4; ++k) {
    if (ws[k] == 0.0) continue;
    plan.pixel.push_back(static_cast<std::uint32_t>(px[k]));
    plan.weight.push_back(static_cast<T>(ws[k] * w));
  }
}

}  // namespace detail

/// Rotated RoIAlign sampling plan: the box is split into S x S bins in its own
/// frame (rows along h, columns along w; bin (0,0) at local (-w/2, -h/2)),
/// each bin averaging r x r regularly spaced bilinear samples.
template <class T>
PoolPlan<T> make_roi_plan(const FeaturePyramid<T>& pyr, std::size_t level_index, const OrientedBox& b,
                          std::size_t out_size, std::size_t sampling_ratio) {
  if (out_size == 0 || sampling_ratio == 0) throw ShapeError("roi_align: S and r must be >= 1");
  const auto& m = pyr.levels.at(level_index);
  PoolPlan<T> plan;
  plan.level_index = level_index;
  plan.row_start.reserve(out_size * out_size + 1);
  plan.row_start.push_back(0);
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double bw = b.w / static_cast<double>(out_size);
  const double bh = b.h / static_cast<double>(out_size);
  const double r = static_cast<double>(sampling_ratio);
  const double sw = 1.0 / (r * r);
  for (std::size_t i = 0; i < out_size; ++i) {
    for (std::size_t j = 0; j < out_size; ++j) {
      for (std::size_t sy = 0; sy < sampling_ratio; ++sy) {
        const double ly = -0.5 * b.h + (static_cast<double>(i) + (sy + 0.5) / r) * bh;
        for (std::size_t sx = 0; sx < sampling_ratio; ++sx) {
          const double lx = -0.5 * b.w + (static_cast<double>(j) + (sx + 0.5) / r) * bw;
          detail::add_bilinear_taps(m.height(), m.width(), m.stride(), b.cx + c * lx - s * ly,
                                    b.cy + s * lx + c * ly, sw, plan);
        }
      }
      plan.row_start.push_back(static_cast<std::uint32_t>(plan.pixel.size()));
    }
  }
  return plan;
}

namespace ag {

/// Applies one plan per region: out[n, cell, :] = sum_k w_k * level[pixel_k, :].
/// `levels` holds one Var per pyramid level ([H, W, C]).
template <class T>
Var<T> pool_regions(const std::vector<Var<T>>& levels, std::vector<PoolPlan<T>> plans) {
  if (levels.empty() || plans.empty()) throw ShapeError("pool_regions: nothing to pool");
  const std::size_t c = levels.front().value().dim(2);
  const std::size_t cells = plans.front().cells();
  const std::size_t n = plans.size();
  Tensor<T> out(Shape{n, cells, c});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = plans[i];
    if (p.cells() != cells) throw ShapeError("pool_regions: plans disagree on cell count");
    const T* f = levels.at(p.level_index).value().data();
    for (std::size_t cell = 0; cell < cells; ++cell) {
      T* o = out.data() + (i * cells + cell) * c;
      for (std::uint32_t t = p.row_start[cell]; t < p.row_start[cell + 1]; ++t) {
        const T w = p.weight[t];
        const T* src = f + static_cast<std::size_t>(p.pixel[t]) * c;
        for (std::size_t ch = 0; ch < c; ++ch) o[ch] += w * src[ch];
      }
    }
  }
  bool rg = false;
  for (const auto& v : levels) rg = rg || v.requires_grad();
  auto shared = std::make_shared<std::vector<PoolPlan<T>>>(std::move(plans));
  return levels.front().graph->make(std::move(out), rg, [levels, shared, cells, c](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    for (std::size_t i = 0; i < shared->size(); ++i) {
      const auto& p = (*shared)[i];
      Var<T> lv = levels[p.level_index];
      if (!lv.requires_grad()) continue;
      auto& gf = g->grad(lv);
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const T* gr = go.data() + (i * cells + cell) * c;
        for (std::uint32_t t = p.row_start[cell]; t < p.row_start[cell + 1]; ++t) {
          const T w = p.weight[t];
          T* dst = gf.data() + static_cast<std::size_t>(p.pixel[t]) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * gr[ch];
        }
      }
    }
  });
}

}  // namespace ag

/// Bilinear resize matrix [S*S, A*A] for square grids. Source coordinate
/// x_src = (x_dst + 0.5) * A / S - 0.5, clamped to [0, A - 1].
template <class T>
Tensor<T> resize_matrix(std::size_t a, std::size_t s) {
  if (a == 0 || s == 0) throw ShapeError("resize: empty grid");
  auto axis = [&](std::size_t d, std::size_t& i0, std::size_t& i1, double& f) {
    double x = (static_cast<double>(d) + 0.5) * static_cast<double>(a) / static_cast<double>(s) - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(a - 1));
    i0 = static_cast<std::size_t>(std::floor(x));
    i1 = std::min(i0 + 1, a - 1);
    f = x - static_cast<double>(i0);
  };
  Tensor<T> m(Shape{s * s, a * a});
  for (std::size_t i = 0; i < s; ++i) {
    std::size_t r0, r1;
    double fy;
    axis(i, r0, r1, fy);
    for (std::size_t j = 0; j < s; ++j) {
      std::size_t c0, c1;
      double fx;
      axis(j, c0, c1, fx);
      const std::size_t row = i * s + j;
      m.at(row, r0 * a + c0) += static_cast<T>((1 - fy) * (1 - fx));
      m.at(row, r0 * a + c1) += static_cast<T>((1 - fy) * fx);
      m.at(row, r1 * a + c0) += static_cast<T>(fy * (1 - fx));
      m.at(row, r1 * a + c1) += static_cast<T>(fy * fx);
    }
  }
  return m;
}

/// Bilinear resize of an [A, A, C] grid to [S, S, C].
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& grid, std::size_t s) {
  if (grid.rank() != 3 || grid.dim(0) != grid.dim(1)) throw ShapeError("resize_bilinear: expected [A, A, C]");
  const std::size_t a = grid.dim(0), c = grid.dim(2);
  const Tensor<T> flat = grid.reshaped({1, a * a, c});
  Graph<T> g(false);
  auto x = g.view(flat);
  return ag::const_left_matmul(resize_matrix<T>(a, s), x).value().reshaped({s, s, c});
}

/// Flat indices of the centered `inner` x `inner` block of an `outer` grid.
inline std::vector<std::size_t> center_indices(std::size_t outer, std::size_t inner) {
  const std::size_t m = (outer - inner) / 2;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < inner; ++i)
    for (std::size_t j = 0; j < inner; ++j) idx.push_back((m + i) * outer + m + j);
  return idx;
}

/// [S*S, A*A] operator producing the background grid: the center block is
/// replaced by the mean of the surrounding ring, then the grid is resized.
template <class T>
Tensor<T> background_matrix(std::size_t outer, std::size_t inner, std::size_t s) {
  const std::size_t cells = outer * outer;
  const auto center = center_indices(outer, inner);
  std::vector<bool> is_center(cells, false);
  for (auto k : center) is_center[k] = true;
  const double ring = static_cast<double>(cells - center.size());
  // replace-center operator Z [cells, cells]
  std::vector<double> z(cells * cells, 0.0);
  for (std::size_t r = 0; r < cells; ++r) {
    if (!is_center[r]) {
      z[r * cells + r] = 1.0;
      continue;
    }
    for (std::size_t k = 0; k < cells; ++k)
      if (!is_center[k]) z[r * cells + k] = 1.0 / ring;
  }
  const Tensor<T> resize = resize_matrix<T>(outer, s);
  Tensor<T> out(Shape{s * s, cells});
  for (std::size_t i = 0; i < s * s; ++i)
    for (std::size_t k = 0; k < cells; ++k) {
      const double rv = static_cast<double>(resize.at(i, k));
      if (rv == 0.0) continue;
      for (std::size_t j = 0; j < cells; ++j) out.at(i, j) += static_cast<T>(rv * z[k * cells + j]);
    }
  return out;
}

template <class T>
struct DualContextFeatures {
  Tensor<T> obj;     // [S, S, C]
  Tensor<T> bg;      // [S, S, C]
  Tensor<T> mu_bg;   // [C], ring mean of the extended grid (empty for separate pooling)
  int level_index = 0;      // pyramid level k of obj
  int bg_level_index = 0;   // pyramid level k of bg
};

/// Splits an extended RoI grid [A, A, C] into object (center crop), background
/// (center replaced by ring mean, then resized) and the ring mean itself.
template <class T>
DualContextFeatures<T> split_dual_context(const Tensor<T>& roi, std::size_t inner = kRoiSize) {
  if (roi.rank() != 3 || roi.dim(0) != roi.dim(1)) throw ShapeError("split_dual_context: expected [A, A, C]");
  const std::size_t a = roi.dim(0), c = roi.dim(2);
  if (inner > a || (a - inner) % 2 != 0) throw ShapeError("split_dual_context: crop parity mismatch");
  const Tensor<T> flat = roi.reshaped({1, a * a, c});
  Graph<T> g(false);
  auto x = g.view(flat);
  DualContextFeatures<T> out;
  out.obj = ag::select_axis1(x, center_indices(a, inner)).value().reshaped({inner, inner, c});
  out.bg = ag::const_left_matmul(background_matrix<T>(a, inner, inner), x).value().reshaped({inner, inner, c});
  out.mu_bg = Tensor<T>(Shape{c});
  const auto center = center_indices(a, inner);
  std::vector<bool> is_center(a * a, false);
  for (auto k : center) is_center[k] = true;
  for (std::size_t k = 0; k < a * a; ++k)
    if (!is_center[k])
      for (std::size_t ch = 0; ch < c; ++ch) out.mu_bg[ch] += roi[k * c + ch];
  for (auto& v : out.mu_bg.storage()) v /= static_cast<T>(a * a - center.size());
  return out;
}

enum class PoolingKind { kDualContext, kSeparate };

/// Graph-level pooled RoI features for a set of boxes.
template <class T>
struct PooledRois {
  Var<T> obj;  // [N, S*S, C]
  Var<T> bg;   // [N, S*S, C]
  std::vector<int> obj_levels;
  std::vector<int> bg_levels;
};

namespace nn {

/// Dual-Context Pooling for each box: one 13x13 rotated RoIAlign over the
/// alpha-extended box on the level assigned to that extended box; object
/// features are the central 7x7 crop, background features the resized grid
/// with its center replaced by the ring mean.
template <class T>
PooledRois<T> dual_context_pool(const FeaturePyramid<T>& pyr, const std::vector<Var<T>>& levels,
                                const std::vector<OrientedBox>& boxes, double alpha = kDefaultAlpha,
                                std::size_t sampling_ratio = kDefaultSamplingRatio) {
  std::vector<PoolPlan<T>> plans;
  PooledRois<T> out;
  plans.reserve(boxes.size());
  for (const auto& b : boxes) {
    const OrientedBox ext = extend_box(b, alpha);
    const int level = assign_pyramid_level(ext, pyr);
    out.obj_levels.push_back(level);
    out.bg_levels.push_back(level);
    plans.push_back(make_roi_plan(pyr, pyr.index_of(level), ext, kExtendedRoiSize, sampling_ratio));
  }
  auto roi = ag::pool_regions(levels, std::move(plans));
  static const Tensor<T> bg_op = background_matrix<T>(kExtendedRoiSize, kRoiSize, kRoiSize);
  out.obj = ag::select_axis1(roi, center_indices(kExtendedRoiSize, kRoiSize));
  out.bg = ag::const_left_matmul(bg_op, roi);
  return out;
}

/// Baseline: object and background regions pooled independently at 7x7, each
/// on its own assigned level; the object interior is not masked.
template <class T>
PooledRois<T> separate_pool(const FeaturePyramid<T>& pyr, const std::vector<Var<T>>& levels,
                            const std::vector<OrientedBox>& boxes, double alpha = kDefaultAlpha,
                            std::size_t sampling_ratio = kDefaultSamplingRatio) {
  std::vector<PoolPlan<T>> obj_plans, bg_plans;
  PooledRois<T> out;
  for (const auto& b : boxes) {
    const OrientedBox ext = extend_box(b, alpha);
    const int lo = assign_pyramid_level(b, pyr);
    const int lb = assign_pyramid_level(ext, pyr);
    out.obj_levels.push_back(lo);
    out.bg_levels.push_back(lb);
    obj_plans.push_back(make_roi_plan(pyr, pyr.index_of(lo), b, kRoiSize, sampling_ratio));
    bg_plans.push_back(make_roi_plan(pyr, pyr.index_of(lb), ext, kRoiSize, sampling_ratio));
  }
  out.obj = ag::pool_regions(levels, std::move(obj_plans));
  out.bg = ag::pool_regions(levels, std::move(bg_plans));
  return out;
}

template <class T>
std::vector<Var<T>> pyramid_views(Graph<T>& g, const FeaturePyramid<T>& pyr) {
  std::vector<Var<T>> out;
  for (const auto& m : pyr.levels) out.push_back(g.view(m.values));
  return out;
}

}  // namespace nn

/// Bilinear read of one image point; returns the C-channel vector.
template <class T>
Tensor<T> bilinear_sample(const FeatureMap<T>& m, double x, double y) {
  PoolPlan<T> plan;
  plan.row_start = {0};
  detail::add_bilinear_taps(m.height(), m.width(), m.stride(), x, y, 1.0, plan);
  plan.row_start.push_back(static_cast<std::uint32_t>(plan.pixel.size()));
  const std::size_t c = m.channels();
  Tensor<T> out(Shape{c});
  for (std::size_t t = 0; t < plan.pixel.size(); ++t)
    for (std::size_t ch = 0; ch < c; ++ch)
      out[ch] += plan.weight[t] * m.values[static_cast<std::size_t>(plan.pixel[t]) * c + ch];
  return out;
}

/// Rotated RoIAlign of one box on one map; [S, S, C].
template <class T>
Tensor<T> rotated_roi_align(const FeatureMap<T>& m, const OrientedBox& b, std::size_t out_size,
                            std::size_t sampling_ratio = kDefaultSamplingRatio) {
  validate_box(b);
  FeaturePyramid<T> single;
  single.levels.push_back(m);  // copy keeps the API simple; only used outside the hot path
  Graph<T> g(false);
  auto levels = nn::pyramid_views(g, single);
  auto plan = make_roi_plan(single, 0, b, out_size, sampling_ratio);
  return ag::pool_regions(levels, {std::move(plan)}).value().reshaped({out_size, out_size, m.channels()});
}

template <class T>
DualContextFeatures<T> dual_context_pool(const FeaturePyramid<T>& pyr, const OrientedBox& b,
                                         double alpha = kDefaultAlpha,
                                         std::size_t sampling_ratio = kDefaultSamplingRatio) {
  validate_box(b);
  const OrientedBox ext = extend_box(b, alpha);
  const int level = assign_pyramid_level(ext, pyr);
  Graph<T> g(false);
  auto levels = nn::pyramid_views(g, pyr);
  auto plan = make_roi_plan(pyr, pyr.index_of(level), ext, kExtendedRoiSize, sampling_ratio);
  const std::size_t c = pyr.channels();
  auto roi = ag::pool_regions(levels, {std::move(plan)}).value().reshaped({kExtendedRoiSize, kExtendedRoiSize, c});
  auto out = split_dual_context(roi);
  out.level_index = level;
  out.bg_level_index = level;
  return out;
}

template <class T>
DualContextFeatures<T> separate_pool(const FeaturePyramid<T>& pyr, const OrientedBox& b,
                                     double alpha = kDefaultAlpha,
                                     std::size_t sampling_ratio = kDefaultSamplingRatio) {
  validate_box(b);
  Graph<T> g(false);
  auto levels = nn::pyramid_views(g, pyr);
  auto pooled = nn::separate_pool(pyr, levels, {b}, alpha, sampling_ratio);
  const std::size_t c = pyr.channels();
  DualContextFeatures<T> out;
  out.obj = pooled.obj.value().reshaped({kRoiSize, kRoiSize, c});
  out.bg = pooled.bg.value().reshaped({kRoiSize, kRoiSize, c});
  out.level_index = pooled.obj_levels[0];
  out.bg_level_index = pooled.bg_levels[0];
  return out;
}

}  // namespace rsparse
