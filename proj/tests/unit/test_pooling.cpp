// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "rsparse/gradcheck.hpp"
#include "rsparse/pooling.hpp"

using namespace rsparse;

namespace {

FeaturePyramid<double> make_pyramid(int image, std::size_t c, std::mt19937_64* rng, double constant = 0.0) {
  std::normal_distribution<double> nd(0.0, 1.0);
  FeaturePyramid<double> p;
  p.image_width = p.image_height = image;
  for (int l = 2; l <= 5; ++l) {
    const std::size_t n = static_cast<std::size_t>((image + (1 << l) - 1) >> l);
    Tensor<double> t(Shape{n, n, c}, constant);
    if (rng)
      for (auto& v : t.storage()) v = nd(*rng);
    p.levels.push_back({l, std::move(t)});
  }
  return p;
}

// Mean of the cells (i0..i0+k-1, j0..j0+k-1) of one channel.
double block_mean(const FeatureMap<double>& m, std::size_t i0, std::size_t j0, std::size_t k, std::size_t ch) {
  double s = 0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) s += m.values.at(i0 + a, j0 + b, ch);
  return s / double(k * k);
}

}  // namespace

TEST(LevelAssignment, ReferenceSizes) {
  EXPECT_EQ(assign_level({0, 0, 224, 224, 0}), 4);
  EXPECT_EQ(assign_level({0, 0, 56, 56, 0}), 2);
  EXPECT_EQ(assign_level({0, 0, 10, 10, 0}), 2);
  EXPECT_EQ(assign_level({0, 0, 2000, 2000, 0}), 5);
}

TEST(LevelAssignment, QuadrupledAreaMovesUpOneLevel) {
  for (double s : {90.0, 120.0, 150.0, 200.0}) {
    const int k = assign_level({0, 0, s, s * 0.7, 0.3});
    const int k2 = assign_level({0, 0, 2 * s, 2 * s * 0.7, 0.3});
    EXPECT_EQ(k2, std::min(k + 1, 5)) << s;
  }
}

TEST(BilinearSample, CellCenterAndMidpoint) {
  std::mt19937_64 rng(1);
  auto pyr = make_pyramid(64, 3, &rng);
  const auto& m = pyr.levels[1];  // stride 8
  const auto at_center = bilinear_sample(m, 8 * 2.5, 8 * 3.5);  // cell (3, 2)
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(at_center[c], m.values.at(3, 2, c));
  const auto mid = bilinear_sample(m, 8 * 3.0, 8 * 3.5);  // between cells (3,2) and (3,3)
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(mid[c], 0.5 * (m.values.at(3, 2, c) + m.values.at(3, 3, c)), 1e-15);
}

TEST(BilinearSample, ConstantMapAndOutside) {
  auto pyr = make_pyramid(64, 2, nullptr, 0.25);
  const auto& m = pyr.levels[0];
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 64.0);
  for (int k = 0; k < 100; ++k) {
    const auto v = bilinear_sample(m, u(rng), u(rng));
    EXPECT_NEAR(v[0], 0.25, 1e-15);
  }
  EXPECT_EQ(bilinear_sample(m, -0.5, 10.0)[0], 0.0);
  EXPECT_EQ(bilinear_sample(m, 10.0, 64.5)[0], 0.0);
}

TEST(RotatedRoiAlign, ConstantField) {
  auto pyr = make_pyramid(128, 4, nullptr, 1.5);
  const auto out = rotated_roi_align(pyr.levels[0], {64, 60, 40, 22, 0.7}, 7, 2);
  ASSERT_EQ(out.shape(), (Shape{7, 7, 4}));
  for (double v : out.values()) EXPECT_NEAR(v, 1.5, 1e-14);
}

TEST(RotatedRoiAlign, AlignedBoxReadsCells) {
  std::mt19937_64 rng(3);
  auto pyr = make_pyramid(128, 3, &rng);
  const auto& m = pyr.levels[0];  // stride 4
  // 7x7 cells starting at cell (5, 9)
  const OrientedBox b{9 * 4 + 14.0, 5 * 4 + 14.0, 28, 28, 0};
  const auto out = rotated_roi_align(m, b, 7, 1);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out.at(i, j, c), m.values.at(5 + i, 9 + j, c));
}

TEST(RotatedRoiAlign, HalfTurnFlipsGrid) {
  std::mt19937_64 rng(4);
  auto pyr = make_pyramid(128, 2, &rng);
  const auto& m = pyr.levels[0];
  const OrientedBox b{61.3, 58.2, 40, 18, 0.4};
  const auto a = rotated_roi_align(m, b, 7, 2);
  const auto r = rotated_roi_align(m, {b.cx, b.cy, b.w, b.h, b.theta + kPi}, 7, 2);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(r.at(i, j, c), a.at(6 - i, 6 - j, c), 1e-12);
}

TEST(RotatedRoiAlign, QuarterTurnTransposesGrid) {
  std::mt19937_64 rng(5);
  auto pyr = make_pyramid(128, 2, &rng);
  const auto& m = pyr.levels[0];
  const OrientedBox b{63.1, 60.7, 36, 20, -0.3};
  const auto a = rotated_roi_align(m, b, 7, 2);
  // same point set, w/h swapped
  const auto q = rotated_roi_align(m, {b.cx, b.cy, b.h, b.w, b.theta + kHalfPi}, 7, 2);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(q.at(i, j, c), a.at(j, 6 - i, c), 1e-12);
}

TEST(ResizeBilinear, IdentityConstantCentroid) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  Tensor<double> g(Shape{7, 7, 3});
  for (auto& v : g.storage()) v = nd(rng);
  EXPECT_LE(max_abs_diff(resize_bilinear(g, 7), g), 0.0);
  const auto c = resize_bilinear(Tensor<double>(Shape{13, 13, 2}, 4.0), 7);
  for (double v : c.values()) EXPECT_NEAR(v, 4.0, 1e-14);
  const auto one = resize_bilinear(Tensor<double>::from({2, 2, 1}, {0, 1, 2, 3}), 1);
  EXPECT_DOUBLE_EQ(one[0], 1.5);
}

TEST(DualContextPool, ConstantField) {
  auto pyr = make_pyramid(256, 4, nullptr, 2.5);
  const auto f = dual_context_pool(pyr, {120, 130, 50, 30, 0.9});
  ASSERT_EQ(f.obj.shape(), (Shape{7, 7, 4}));
  for (double v : f.obj.values()) EXPECT_NEAR(v, 2.5, 1e-14);
  for (double v : f.bg.values()) EXPECT_NEAR(v, 2.5, 1e-14);
  for (double v : f.mu_bg.values()) EXPECT_NEAR(v, 2.5, 1e-14);
}

TEST(DualContextPool, RingAndCenterGrid) {
  Tensor<double> grid(Shape{13, 13, 2}, 2.0);
  for (std::size_t i = 3; i <= 9; ++i)
    for (std::size_t j = 3; j <= 9; ++j)
      for (std::size_t c = 0; c < 2; ++c) grid.at(i, j, c) = 5.0;
  const auto f = split_dual_context(grid);
  for (double v : f.mu_bg.values()) EXPECT_DOUBLE_EQ(v, 2.0);
  for (double v : f.bg.values()) EXPECT_NEAR(v, 2.0, 1e-14);
  for (double v : f.obj.values()) EXPECT_EQ(v, 5.0);
}

TEST(DualContextPool, RingMeanIgnoresCenter) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  Tensor<double> grid(Shape{13, 13, 3});
  for (auto& v : grid.storage()) v = nd(rng);
  const auto base = split_dual_context(grid);
  // hand mean over the 120 ring cells
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 13; ++i)
      for (std::size_t j = 0; j < 13; ++j)
        if (i < 3 || i > 9 || j < 3 || j > 9) s += grid.at(i, j, c);
    EXPECT_NEAR(base.mu_bg[c], s / 120, 1e-14);
  }
  for (std::size_t i = 3; i <= 9; ++i)
    for (std::size_t j = 3; j <= 9; ++j)
      for (std::size_t c = 0; c < 3; ++c) grid.at(i, j, c) = 1e6;
  const auto poisoned = split_dual_context(grid);
  EXPECT_EQ(poisoned.mu_bg, base.mu_bg);
  EXPECT_LE(max_abs_diff(poisoned.bg, base.bg), 1e-9);
}

TEST(DualContextPool, SharedLevelForRandomBoxes) {
  auto pyr = make_pyramid(256, 1, nullptr, 1.0);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> pos(0, 256), size(2, 300), ang(-kHalfPi, kHalfPi);
  std::vector<OrientedBox> boxes;
  for (int k = 0; k < 10000; ++k) boxes.push_back({pos(rng), pos(rng), size(rng), size(rng), ang(rng)});
  Graph<double> g(false);
  auto levels = nn::pyramid_views(g, pyr);
  const auto pooled = nn::dual_context_pool(pyr, levels, boxes);
  ASSERT_EQ(pooled.obj_levels.size(), boxes.size());
  EXPECT_EQ(pooled.obj_levels, pooled.bg_levels);
  for (std::size_t k = 0; k < boxes.size(); ++k)
    EXPECT_EQ(pooled.obj_levels[k], assign_level(extend_box(boxes[k], kDefaultAlpha)));
}

TEST(DualContextPool, CropNeedsNoInterpolation) {
  std::mt19937_64 rng(9);
  auto pyr = make_pyramid(256, 3, &rng);
  const auto& p2 = pyr.at_level(2);
  // r = 1: a 7-cell stride-aligned box; the extended grid lands on cell centers
  {
    const OrientedBox b{4 * 20 + 14.0, 4 * 24 + 14.0, 28, 28, 0};
    const auto f = dual_context_pool(pyr, b, kDefaultAlpha, 1);
    ASSERT_EQ(f.level_index, 2);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(f.obj.at(i, j, c), p2.values.at(24 + i, 20 + j, c), 1e-12);
  }
  // r = 2 with 2x2-cell bins: every sample is a cell center
  {
    const OrientedBox b{4 * 10 + 28.0, 4 * 12 + 28.0, 56, 56, 0};
    const auto f = dual_context_pool(pyr, b);
    ASSERT_EQ(f.level_index, 2);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j)
        for (std::size_t c = 0; c < 3; ++c)
          EXPECT_NEAR(f.obj.at(i, j, c), block_mean(p2, 12 + 2 * i, 10 + 2 * j, 2, c), 1e-12);
    // and equals pooling the object box directly
    const auto direct = rotated_roi_align(p2, b, 7, 2);
    EXPECT_LE(max_abs_diff(direct, f.obj), 1e-12);
  }
}

TEST(SeparatePool, ConstantFieldAndLevels) {
  auto pyr = make_pyramid(256, 2, nullptr, 0.5);
  const auto f = separate_pool(pyr, {128, 128, 30, 20, 0.2});
  EXPECT_EQ(f.level_index, f.bg_level_index);
  for (double v : f.obj.values()) EXPECT_NEAR(v, 0.5, 1e-14);
  for (double v : f.bg.values()) EXPECT_NEAR(v, 0.5, 1e-14);
  const auto split = separate_pool(pyr, {128, 128, 80, 80, 0});
  EXPECT_EQ(split.level_index, 2);
  EXPECT_EQ(split.bg_level_index, 3);
}

TEST(SeparatePool, MatchesDualContextObjectOnConstantSingleLevel) {
  FeaturePyramid<double> pyr;
  pyr.image_width = pyr.image_height = 64;
  pyr.levels.push_back({2, Tensor<double>(Shape{16, 16, 2}, -1.25)});
  const OrientedBox b{30, 33, 20, 12, 0.5};
  EXPECT_LE(max_abs_diff(separate_pool(pyr, b).obj, dual_context_pool(pyr, b).obj), 1e-14);
}

TEST(DualContextPool, GradientWithRespectToFeatures) {
  std::mt19937_64 rng(10);
  auto pyr = make_pyramid(64, 2, &rng);
  const std::vector<OrientedBox> boxes{{30, 28, 16, 10, 0.3}, {20, 40, 24, 12, -0.8}};
  std::vector<Tensor<double>> inputs;
  for (const auto& l : pyr.levels) inputs.push_back(l.values);
  GradCheckOptions opt;
  opt.floor = 1e-8;
  for (auto kind : {PoolingKind::kDualContext, PoolingKind::kSeparate}) {
    const auto rep = check_input_grads(
        "pool", inputs,
        [&](Graph<double>&, const std::vector<Var<double>>& lv) {
          auto r = kind == PoolingKind::kDualContext ? nn::dual_context_pool(pyr, lv, boxes)
                                                     : nn::separate_pool(pyr, lv, boxes);
          return ag::add(ag::random_projection(r.obj, 1), ag::random_projection(r.bg, 2));
        },
        opt);
    EXPECT_TRUE(rep.passed(1e-4)) << rep.max_rel_error << " " << rep.worst;
  }
}

TEST(Pyramid, ValidateRejectsBadExtent) {
  auto pyr = make_pyramid(64, 2, nullptr);
  EXPECT_NO_THROW(pyr.validate());
  pyr.levels[1].values = Tensor<double>(Shape{7, 8, 2});
  EXPECT_THROW(pyr.validate(), ShapeError);
}
