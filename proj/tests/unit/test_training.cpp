// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "rsparse/gradcheck.hpp"
#include "rsparse/losses.hpp"
#include "rsparse/oracle.hpp"
#include "rsparse/training.hpp"

using namespace rsparse;

namespace {

// Minimum total cost by enumerating every injection with std::next_permutation.
double enumerate_min_cost(const Tensor<double>& cost) {
  const std::size_t n = cost.dim(0), m = cost.dim(1);
  const bool rows_small = n <= m;
  const std::size_t k = std::min(n, m), big = std::max(n, m);
  std::vector<std::size_t> perm(big);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = INFINITY;
  do {
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += rows_small ? cost.at(i, perm[i]) : cost.at(perm[i], i);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Tensor<double> random_cost(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 10);
  Tensor<double> c(Shape{n, m});
  for (auto& v : c.storage()) v = u(rng);
  return c;
}

GroundTruthScene scene_with(std::vector<OrientedBox> boxes, int w = 100, int h = 100) {
  GroundTruthScene s;
  s.scene_id = "t";
  s.image_width = w;
  s.image_height = h;
  s.boxes = std::move(boxes);
  return s;
}

struct StageValues {
  std::vector<double> logits;
  std::vector<OrientedBox> boxes;
};

double set_loss_value(const std::vector<StageValues>& stages, const GroundTruthScene& gts,
                      const SetLossOptions& opt = {}, std::size_t* matched = nullptr) {
  Graph<double> g(false);
  std::vector<StagePrediction<double>> preds;
  for (const auto& s : stages) {
    Tensor<double> l(Shape{s.logits.size(), 1}, std::vector<double>(s.logits));
    preds.push_back({g.constant(l), g.constant(boxes_to_tensor<double>(s.boxes))});
  }
  auto r = set_loss(preds, gts, opt);
  if (matched) *matched = r.matched_pairs;
  return r.loss.value()[0];
}

}  // namespace

TEST(FocalLoss, ClosedForms) {
  EXPECT_NEAR(focal_loss(0.0, 1), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(0.0, 1), 0.043322, 1e-6);
  EXPECT_NEAR(focal_loss(0.0, 0), 0.75 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(0.0, 0), 0.129966, 1e-6);
  EXPECT_LT(focal_loss(40.0, 1), 1e-30);
  EXPECT_LT(focal_loss(-40.0, 0), 1e-30);
}

TEST(FocalLoss, MatchesTextbookFormAndIsNonNegative) {
  for (double z = -12; z <= 12; z += 0.37) {
    const double p = 1 / (1 + std::exp(-z));
    EXPECT_NEAR(focal_loss(z, 1), -0.25 * (1 - p) * (1 - p) * std::log(p), 1e-12 * std::max(1.0, std::abs(z)));
    EXPECT_NEAR(focal_loss(z, 0), -0.75 * p * p * std::log(1 - p), 1e-12 * std::max(1.0, std::abs(z)));
    EXPECT_GE(focal_loss(z, 1), 0);
    EXPECT_GE(focal_loss(z, 0), 0);
    EXPECT_NEAR(focal_loss_grad(z, 1), (focal_loss(z + 1e-6, 1) - focal_loss(z - 1e-6, 1)) / 2e-6, 1e-8);
    EXPECT_NEAR(focal_loss_grad(z, 0), (focal_loss(z + 1e-6, 0) - focal_loss(z - 1e-6, 0)) / 2e-6, 1e-8);
  }
  EXPECT_TRUE(std::isfinite(focal_loss(-800, 1)));
  EXPECT_TRUE(std::isfinite(focal_loss(800, 0)));
}

TEST(L1BoxLoss, Cases) {
  const OrientedBox gt{50, 50, 20, 10, 0.3};
  EXPECT_EQ(l1_box_loss(gt, gt, 100, 100), 0.0);
  EXPECT_NEAR(l1_box_loss({60, 50, 20, 10, 0.3}, gt, 100, 100), 0.1, 1e-15);
  EXPECT_NEAR(l1_box_loss({50, 50, 20, 10, 0.3 + kHalfPi - 0.3 - 0.2}, {50, 50, 20, 10, -0.2 - 0.0}, 100, 100) -
                  l1_box_loss({50, 50, 20, 10, kHalfPi - 0.2}, {50, 50, 20, 10, -0.2}, 100, 100),
              0.0, 1e-15);
  EXPECT_NEAR(l1_box_loss({50, 50, 20, 10, 0.25}, {50, 50, 20, 10, 0.25 - kHalfPi}, 100, 100), 0.5, 1e-15);
}

TEST(L1BoxLoss, PeriodicAngleOption) {
  const OrientedBox a{0, 0, 4, 2, kHalfPi - 0.01}, b{0, 0, 4, 2, -kHalfPi + 0.01};
  EXPECT_NEAR(l1_box_loss(a, b, 100, 100), (kPi - 0.02) / kPi, 1e-12);
  EXPECT_NEAR(l1_box_loss(a, b, 100, 100, true), 0.02 / kPi, 1e-12);
}

TEST(IouLoss, Cases) {
  EXPECT_NEAR(iou_loss({3, 3, 4, 2, 0.2}, {3, 3, 4, 2, 0.2}), 0.0, 1e-12);
  EXPECT_EQ(iou_loss({0, 0, 2, 2, 0}, {10, 10, 2, 2, 0}), 1.0);
  EXPECT_NEAR(iou_loss({0, 0, 2, 2, 0}, {1, 0, 2, 2, 0}), 2.0 / 3, 1e-9);
}

TEST(CostMatrix, PerfectPredictionIsFree) {
  const auto gts = scene_with({{40, 40, 20, 8, 0.4}});
  const auto c = matching_cost_matrix({30.0}, {{40, 40, 20, 8, 0.4}}, gts, LossWeights{});
  EXPECT_NEAR(c.at(0, 0), 0.0, 1e-12);
}

TEST(CostMatrix, WeightZeroingGivesPureL1) {
  std::mt19937_64 rng(1);
  const auto gts = scene_with({{40, 40, 20, 8, 0.4}, {70, 20, 12, 6, -1.0}});
  const std::vector<OrientedBox> boxes{{42, 38, 18, 9, 0.3}, {65, 22, 10, 5, -0.9}, {10, 10, 5, 5, 0}};
  const auto c = matching_cost_matrix({0.3, -1.0, 2.0}, boxes, gts, LossWeights{0, 1, 0});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(c.at(i, j), l1_box_loss(boxes[i], gts.boxes[j], 100, 100));
}

TEST(CostMatrix, HandInstanceComposesLosses) {
  const auto gts = scene_with({{0, 0, 2, 2, 0}, {50, 50, 10, 4, 0}});
  const std::vector<OrientedBox> boxes{{1, 0, 2, 2, 0}, {50, 50, 10, 4, 0}};
  const auto c = matching_cost_matrix({0.0, 0.0}, boxes, gts, LossWeights{});
  const double cls = 2.0 * 0.25 * 0.25 * std::log(2.0);
  EXPECT_NEAR(c.at(0, 0), cls + 5.0 * 0.01 + 2.0 * (2.0 / 3), 1e-9);
  EXPECT_NEAR(c.at(1, 1), cls, 1e-9);
  // disjoint pairs: IoU term is the full weight
  const double l1_01 = (49.0 + 50.0 + 8.0 + 2.0) / 100.0;
  EXPECT_NEAR(c.at(0, 1), cls + 5.0 * l1_01 + 2.0, 1e-9);
  for (double v : c.values()) EXPECT_GE(v, 0);
}

TEST(CostMatrix, EmptyTruth) {
  const auto c = matching_cost_matrix({0.0, 1.0}, {{1, 1, 1, 1, 0}, {2, 2, 1, 1, 0}}, scene_with({}), LossWeights{});
  EXPECT_EQ(c.shape(), (Shape{2, 0}));
  const auto m = hungarian_match(c);
  EXPECT_TRUE(m.pairs.empty());
  EXPECT_EQ(m.unmatched_predictions.size(), 2u);
}

TEST(Hungarian, DiagonalDominant) {
  Tensor<double> c(Shape{4, 4}, 10.0);
  for (std::size_t i = 0; i < 4; ++i) c.at(i, i) = 0.1;
  const auto m = hungarian_match(c);
  ASSERT_EQ(m.pairs.size(), 4u);
  for (auto [p, t] : m.pairs) EXPECT_EQ(p, t);
}

TEST(Hungarian, TwoByTwoHand) {
  const auto m = hungarian_match(Tensor<double>::from({2, 2}, {1, 2, 2, 4}));
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0], (std::pair<std::size_t, std::size_t>{1, 0}));
  EXPECT_EQ(m.pairs[1], (std::pair<std::size_t, std::size_t>{0, 1}));
  EXPECT_EQ(m.total_cost, 4.0);
}

TEST(Hungarian, SingleEntry) {
  const auto m = hungarian_match(Tensor<double>::from({1, 1}, {3.5}));
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.total_cost, 3.5);
  const auto b = brute_force_match(Tensor<double>::from({1, 1}, {3.5}));
  EXPECT_EQ(b.pairs, m.pairs);
}

TEST(Hungarian, AgreesWithBruteForce) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 500; ++k) {
    const auto c = random_cost(7, 5, rng);
    const auto h = hungarian_match(c), b = brute_force_match(c);
    EXPECT_NEAR(h.total_cost, b.total_cost, 1e-12);
    EXPECT_EQ(h.pairs.size(), 5u);
  }
  std::uniform_int_distribution<std::size_t> side(1, 7);
  for (int k = 0; k < 200; ++k) {
    const auto c = random_cost(side(rng), side(rng), rng);
    const auto h = hungarian_match(c);
    EXPECT_NEAR(h.total_cost, enumerate_min_cost(c), 1e-12);
    EXPECT_NEAR(h.total_cost, brute_force_match(c).total_cost, 1e-12);
    EXPECT_EQ(h.pairs.size(), std::min(c.dim(0), c.dim(1)));
  }
}

TEST(Hungarian, StructureOfResult) {
  std::mt19937_64 rng(3);
  const auto c = random_cost(6, 3, rng);
  const auto m = hungarian_match(c);
  std::vector<int> pred_used(6, 0), gt_used(3, 0);
  for (auto [p, t] : m.pairs) {
    ++pred_used[p];
    ++gt_used[t];
  }
  for (int v : gt_used) EXPECT_EQ(v, 1);
  for (int v : pred_used) EXPECT_LE(v, 1);
  EXPECT_EQ(m.unmatched_predictions.size(), 3u);
}

TEST(Hungarian, TiesBrokenLikeBruteForce) {
  for (std::size_t n : {2, 3, 5}) {
    const Tensor<double> c(Shape{n + 2, n}, 1.0);
    EXPECT_EQ(hungarian_match(c).pairs, brute_force_match(c).pairs);
  }
  const auto c = Tensor<double>::from({3, 2}, {1, 1, 1, 1, 0, 5});
  EXPECT_EQ(hungarian_match(c).pairs, brute_force_match(c).pairs);
}

TEST(Hungarian, RejectsNonFinite) {
  EXPECT_THROW(hungarian_match(Tensor<double>::from({2, 1}, {1, NAN})), Error);
  EXPECT_THROW(brute_force_match(Tensor<double>::from({1, 2}, {INFINITY, 1})), Error);
  EXPECT_THROW(brute_force_match(Tensor<double>(Shape{9, 9})), Error);
}

TEST(SetLoss, PerfectPredictionsVanish) {
  const auto gts = scene_with({{30, 30, 20, 6, 0.5}, {70, 60, 16, 8, -0.2}});
  StageValues st{{30.0, 30.0, -30.0}, {gts.boxes[0], gts.boxes[1], {5, 5, 4, 4, 0}}};
  EXPECT_LT(set_loss_value({st, st, st}, gts), 1e-10);
}

TEST(SetLoss, SingleStageHandInstance) {
  const auto gts = scene_with({{0, 0, 2, 2, 0}});
  StageValues st{{0.0, 1.0}, {{1, 0, 2, 2, 0}, {30, 30, 2, 2, 0}}};
  std::size_t matched = 0;
  const double v = set_loss_value({st}, gts, {}, &matched);
  EXPECT_EQ(matched, 1u);
  // prediction 0 wins the match; prediction 1 is background
  const double want = 2.0 * focal_loss(0.0, 1) + 5.0 * 0.01 + 2.0 * (2.0 / 3) + 2.0 * focal_loss(1.0, 0);
  EXPECT_NEAR(v, want, 1e-12);
}

TEST(SetLoss, StageAdditivity) {
  const auto gts = scene_with({{20, 20, 10, 4, 0.1}});
  StageValues st{{0.5, -0.5, 0.0}, {{22, 21, 9, 5, 0.0}, {60, 60, 8, 8, 1.0}, {10, 80, 6, 3, -1.0}}};
  EXPECT_NEAR(set_loss_value({st, st}, gts), 2 * set_loss_value({st}, gts), 1e-12);
}

TEST(SetLoss, PermutationInvariance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(10, 90), sz(4, 20), ang(-1.5, 1.5), lg(-3, 3);
  auto rb = [&] { return OrientedBox{pos(rng), pos(rng), sz(rng), sz(rng), ang(rng)}; };
  auto gts = scene_with({rb(), rb(), rb()});
  StageValues st;
  for (int i = 0; i < 7; ++i) {
    st.logits.push_back(lg(rng));
    st.boxes.push_back(rb());
  }
  const double base = set_loss_value({st}, gts);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  StageValues ps;
  for (auto i : perm) {
    ps.logits.push_back(st.logits[i]);
    ps.boxes.push_back(st.boxes[i]);
  }
  EXPECT_NEAR(set_loss_value({ps}, gts), base, 1e-12);
  std::reverse(gts.boxes.begin(), gts.boxes.end());
  EXPECT_NEAR(set_loss_value({st}, gts), base, 1e-12);
}

TEST(SetLoss, NoTruthIsClassificationOnly) {
  StageValues st{{0.0, 1.0}, {{10, 10, 4, 4, 0}, {20, 20, 4, 4, 0}}};
  std::size_t matched = 7;
  const double v = set_loss_value({st}, scene_with({}), {}, &matched);
  EXPECT_EQ(matched, 0u);
  EXPECT_NEAR(v, 2.0 * (focal_loss(0.0, 0) + focal_loss(1.0, 0)), 1e-12);
}

TEST(GradientSuite, EveryCasePasses) {
  for (const auto& rep : run_gradient_cases(3))
    EXPECT_TRUE(rep.passed(1e-4)) << rep.name << " " << rep.max_rel_error << " " << rep.worst;
}

// ---------------------------------------------------------------- training loop

namespace {

TrainConfig tiny_train_config() {
  TrainConfig tc;
  tc.model.num_proposals = 16;
  tc.model.channels = 16;
  tc.model.hidden = 4;
  tc.model.heads = 2;
  tc.model.stages = 2;
  tc.model.image_width = tc.model.image_height = 64;
  tc.iterations = 12;
  tc.optim.lr = 1e-3;
  tc.optim.warmup_iters = 4;
  return tc;
}

std::vector<SyntheticScene<double>> tiny_data(std::size_t count) {
  SyntheticSceneConfig s;
  s.image_width = s.image_height = 64;
  s.channels = 16;
  s.min_length = 12;
  s.max_length = 30;
  s.seed = 21;
  return generate_synthetic_dataset<double>(s, count);
}

}  // namespace

TEST(TrainToy, SeedDeterminism) {
  const auto data = tiny_data(3);
  auto tc = tiny_train_config();
  tc.batch_size = 2;
  std::ostringstream la, lb;
  const auto a = train_toy<double>(tc, data, &la);
  const auto b = train_toy<double>(tc, data, &lb);
  ASSERT_EQ(a.log.size(), tc.iterations);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  EXPECT_EQ(la.str(), lb.str());
  tc.seed = 1;
  const auto c = train_toy<double>(tc, data);
  bool differs = false;
  for (std::size_t i = 0; i < a.log.size(); ++i) differs |= a.log[i].loss != c.log[i].loss;
  EXPECT_TRUE(differs);
}

TEST(TrainToy, LogLinesAreJson) {
  auto tc = tiny_train_config();
  tc.iterations = 4;
  tc.eval_every = 2;
  std::ostringstream log;
  train_toy<double>(tc, tiny_data(1), &log);
  std::istringstream in(log.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iter"].get<int>(), n);
    EXPECT_TRUE(j.contains("loss") && j.contains("grad_norm") && j.contains("lr"));
    EXPECT_EQ(j.contains("ap50"), n % 2 == 1);
    ++n;
  }
  EXPECT_EQ(n, 4);
}

TEST(TrainToy, TrainsProposalsAndHead) {
  const auto data = tiny_data(1);
  auto tc = tiny_train_config();
  tc.iterations = 3;
  const auto r = train_toy<double>(tc, data);
  const auto init = make_model<double>(tc.model);
  EXPECT_NE(r.model.proposal_boxes.value, init.proposal_boxes.value);
  EXPECT_NE(r.model.proposal_obj.value, init.proposal_obj.value);
  EXPECT_NE(r.model.stages[1].reg_out.weight.value, init.stages[1].reg_out.weight.value);
  EXPECT_DOUBLE_EQ(r.log[0].lr, 1e-3 / 3);
  EXPECT_DOUBLE_EQ(tc.optim.lr_at(4), 1e-3);
}

TEST(TrainToy, DivergenceGuard) {
  auto data = tiny_data(1);
  data[0].pyramid.levels[0].values[5] = NAN;
  auto tc = tiny_train_config();
  try {
    train_toy<double>(tc, data);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
  EXPECT_THROW(train_toy<double>(tc, {}), Error);
}

TEST(TrainToy, SingleSceneLossDecreases) {
  // smoothed over 50-iteration windows after warm-up
  const auto data = tiny_data(1);
  auto tc = tiny_train_config();
  tc.iterations = 300;
  tc.optim.warmup_iters = 50;
  tc.model.dropout = 0;
  tc.model.fusion = FusionKind::kAddition;
  const auto r = train_toy<double>(tc, data);
  std::vector<double> windows;
  for (std::size_t start = 50; start + 50 <= r.log.size(); start += 50) {
    double s = 0;
    for (std::size_t i = start; i < start + 50; ++i) s += r.log[i].loss;
    windows.push_back(s / 50);
  }
  ASSERT_GE(windows.size(), 4u);
  for (std::size_t k = 1; k < windows.size(); ++k) EXPECT_LT(windows[k], windows[k - 1]) << k;
}
