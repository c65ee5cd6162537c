// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites behind `rsparse oracle`: sampled IoU, exhaustive
// assignment, finite-difference gradients and pooling contracts.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rsparse/detection.hpp"
#include "rsparse/gradcheck.hpp"
#include "rsparse/losses.hpp"
#include "rsparse/matching.hpp"
#include "rsparse/pooling.hpp"

namespace rsparse {

struct OracleReport {
  std::string name;
  std::size_t trials = 0;
  double max_error = 0;
  double tolerance = 0;
  bool passed = false;
};

// ------------------------------------------------------------------------ IoU

inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double inv = 1.0 / double(base), f = inv, r = 0;
  while (i > 0) {
    r += f * double(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

inline bool point_in_box(const OrientedBox& b, double x, double y) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = x - b.cx, dy = y - b.cy;
  return std::abs(dx * c + dy * s) <= b.w / 2 && std::abs(-dx * s + dy * c) <= b.h / 2;
}

/// IoU estimated from a Halton point set over the joint bounding rectangle.
inline double monte_carlo_iou(const OrientedBox& a, const OrientedBox& b, std::size_t samples) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& box : {a, b})
    for (const auto& p : box_corners(box)) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
  std::size_t in_a = 0, in_b = 0, both = 0;
  for (std::size_t i = 1; i <= samples; ++i) {
    const double x = x0 + (x1 - x0) * radical_inverse(i, 2);
    const double y = y0 + (y1 - y0) * radical_inverse(i, 3);
    const bool ia = point_in_box(a, x, y), ib = point_in_box(b, x, y);
    in_a += ia;
    in_b += ib;
    both += ia && ib;
  }
  const double uni = double(in_a + in_b - both);
  return uni > 0 ? double(both) / uni : 0.0;
}

inline OrientedBox random_box(std::mt19937_64& rng, double extent = 100.0) {
  std::uniform_real_distribution<double> pos(0.3 * extent, 0.7 * extent), size(0.05 * extent, 0.5 * extent),
      ang(-kHalfPi, kHalfPi);
  return normalize_box({pos(rng), pos(rng), size(rng), size(rng), ang(rng)});
}

inline OracleReport iou_oracle(std::size_t trials, std::uint64_t seed, std::size_t samples = 1000000) {
  OracleReport r{"iou: exact vs sampled", trials, 0, 3e-3};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto a = random_box(rng), b = random_box(rng);
    r.max_error = std::max(r.max_error, std::abs(rotated_iou(a, b) - monte_carlo_iou(a, b, samples)));
  }
  r.passed = r.max_error <= r.tolerance;
  return r;
}

// ------------------------------------------------------------------ matching

inline OracleReport match_oracle(std::size_t trials, std::uint64_t seed) {
  OracleReport r{"match: hungarian vs brute force", trials, 0, 0};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> side(1, 7);
  std::uniform_real_distribution<double> val(0.0, 10.0);
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor<double> c(Shape{side(rng), side(rng)});
    for (auto& v : c.storage()) v = val(rng);
    r.max_error = std::max(r.max_error, std::abs(hungarian_match(c).total_cost - brute_force_match(c).total_cost));
  }
  r.passed = r.max_error == 0.0;
  return r;
}

// ---------------------------------------------------------------- gradients

namespace detail {

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

inline FeaturePyramid<double> random_pyramid(int image, std::size_t c, std::mt19937_64& rng) {
  FeaturePyramid<double> p;
  p.image_width = p.image_height = image;
  for (int l = 2; l <= 5; ++l) {
    const std::size_t n = static_cast<std::size_t>((image + (1 << l) - 1) >> l);
    p.levels.push_back({l, random_tensor({n, n, c}, rng)});
  }
  return p;
}

}  // namespace detail

using GradCase = std::function<GradReport()>;

/// Small-dimension finite-difference cases covering every differentiable op
/// and a full detection stage with its set loss (matching frozen).
inline std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  using G = Graph<double>;
  using V = std::vector<Var<double>>;
  std::vector<GradCase> cases;
  auto proj = [](Var<double> v) { return ag::random_projection(v, 99); };
  auto input_case = [&](std::string name, std::vector<Shape> shapes, std::function<Var<double>(G&, const V&)> fn,
                        double scale = 1.0) {
    cases.push_back([=]() {
      std::mt19937_64 rng(seed ^ std::hash<std::string>{}(name));
      std::vector<Tensor<double>> in;
      for (const auto& s : shapes) in.push_back(detail::random_tensor(s, rng, scale));
      return check_input_grads(name, in, fn);
    });
  };
  input_case("add", {{3, 4}, {3, 4}}, [=](G&, const V& x) { return proj(ag::add(x[0], x[1])); });
  input_case("mul", {{3, 4}, {3, 4}}, [=](G&, const V& x) { return proj(ag::mul(x[0], x[1])); });
  input_case("scale", {{5}}, [=](G&, const V& x) { return proj(ag::scale(x[0], 1.7)); });
  input_case("relu", {{4, 5}}, [=](G&, const V& x) { return proj(ag::relu(x[0])); });
  input_case("reshape+slice", {{3, 8}}, [=](G&, const V& x) {
    return proj(ag::reshape(ag::slice_last(x[0], 2, 6), {2, 6}));
  });
  input_case("linear", {{3, 4}, {5, 4}, {5}}, [=](G&, const V& x) {
    return proj(ag::linear(x[0], x[1], std::optional<Var<double>>(x[2])));
  });
  input_case("layer_norm", {{3, 6}, {6}, {6}}, [=](G&, const V& x) { return proj(ag::layer_norm(x[0], x[1], x[2])); });
  input_case("softmax", {{3, 5}}, [=](G&, const V& x) { return proj(ag::softmax(x[0])); });
  input_case("bmm", {{2, 3, 4}, {2, 4, 5}}, [=](G&, const V& x) { return proj(ag::bmm(x[0], x[1])); });
  input_case("bmm_t", {{2, 3, 4}, {2, 5, 4}}, [=](G&, const V& x) { return proj(ag::bmm(x[0], x[1], true)); });
  input_case("split/merge heads", {{3, 8}}, [=](G&, const V& x) {
    return proj(ag::merge_heads(ag::scale(ag::split_heads(x[0], 2), 0.5)));
  });
  input_case("dropout", {{4, 6}}, [=](G&, const V& x) {
    std::mt19937_64 rng(5);
    return proj(ag::dropout(x[0], 0.3, ForwardContext{Mode::kTrain, &rng}));
  });
  input_case("gather_rows", {{5, 3}}, [=](G&, const V& x) { return proj(ag::gather_rows(x[0], {4, 1, 1})); });
  input_case("const_left_matmul", {{2, 169, 3}}, [=](G&, const V& x) {
    static const auto m = background_matrix<double>(kExtendedRoiSize, kRoiSize, kRoiSize);
    return proj(ag::const_left_matmul(m, x[0]));
  });
  input_case("select_axis1", {{2, 169, 3}}, [=](G&, const V& x) {
    return proj(ag::select_axis1(x[0], center_indices(kExtendedRoiSize, kRoiSize)));
  });
  input_case("attention", {{4, 8}, {3, 8}, {3, 8}}, [=](G& g, const V& x) {
    std::mt19937_64 rng(3);
    static const AttentionParams<double> p("attn", 8, 2, rng);
    return proj(nn::attention(g, p, x[0], x[1], x[2]));
  });
  input_case("focal_loss_sum", {{6, 1}}, [=](G&, const V& x) {
    return ag::focal_loss_sum(x[0], {1, 0, 0, 1, 0, 1});
  }, 2.0);
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 11);
    std::vector<OrientedBox> gts{random_box(rng), random_box(rng)};
    Tensor<double> pred = boxes_to_tensor<double>({gts[0], gts[1]});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += (i % 5 == 4 ? 0.1 : 3.0) * nd(rng);
    return check_input_grads("l1 + iou box losses", {pred}, [gts](G&, const V& x) {
      return ag::add(ag::l1_box_loss_sum(x[0], gts, 100, 100), ag::iou_loss_sum(x[0], gts));
    });
  });
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 12);
    std::vector<OrientedBox> base{random_box(rng), random_box(rng), random_box(rng)};
    Tensor<double> b = boxes_to_tensor<double>(base);
    Tensor<double> d = detail::random_tensor({3, 5}, rng, 0.3);
    d[4] = 1.2;  // forces a quarter-turn swap in normalization
    GradReport r = check_input_grads("decode_boxes", {b, d}, [](G&, const V& x) {
      return ag::random_projection(ag::decode_boxes(x[0], x[1]), 4);
    });
    return r;
  });
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 13);
    auto pyr = detail::random_pyramid(64, 3, rng);
    std::vector<OrientedBox> boxes{{30, 28, 20, 9, 0.4}, {12, 40, 14, 30, -1.1}};
    std::vector<Tensor<double>> in;
    for (const auto& l : pyr.levels) in.push_back(l.values);
    return check_input_grads("dual_context_pool", in, [pyr, boxes](G&, const V& x) {
      auto p = nn::dual_context_pool(pyr, x, boxes);
      return ag::add(ag::random_projection(p.obj, 1), ag::random_projection(p.bg, 2));
    });
  });
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 14);
    auto pyr = detail::random_pyramid(64, 3, rng);
    std::vector<OrientedBox> boxes{{30, 28, 20, 9, 0.4}, {12, 40, 14, 30, -1.1}};
    std::vector<Tensor<double>> in;
    for (const auto& l : pyr.levels) in.push_back(l.values);
    return check_input_grads("separate_pool", in, [pyr, boxes](G&, const V& x) {
      auto p = nn::separate_pool(pyr, x, boxes);
      return ag::add(ag::random_projection(p.obj, 1), ag::random_projection(p.bg, 2));
    });
  });
  for (auto kind : {FusionKind::kCrossAttention, FusionKind::kAddition, FusionKind::kMultiplication}) {
    cases.push_back([seed, kind]() {
      std::mt19937_64 rng(seed + 15);
      FusionParams<double> p("fusion", 8, 2, 0.2, rng);
      std::vector<Parameter<double>*> params;
      p.visit([&](Parameter<double>& q) { params.push_back(&q); });
      const auto a = detail::random_tensor({3, 8}, rng), b = detail::random_tensor({3, 8}, rng);
      return check_input_grads("fusion/" + std::to_string(int(kind)), {a, b}, [&p, kind](G& g, const V& x) {
        std::mt19937_64 drop(9);
        return ag::random_projection(nn::fusion_head(g, p, x[0], x[1], kind, ForwardContext{Mode::kTrain, &drop}), 3);
      });
    });
  }
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 16);
    InteractionHeadParams<double> p("head", 8, 2, 2, 49, 0.2, rng);
    std::vector<Parameter<double>*> params;
    p.visit([&](Parameter<double>& q) { params.push_back(&q); });
    const auto pro = detail::random_tensor({3, 8}, rng), roi = detail::random_tensor({3, 49, 8}, rng);
    return check_parameter_grads("interaction head params", params, [&](G& g) {
      std::mt19937_64 drop(9);
      auto out = nn::interaction_head(g, p, g.view(pro), g.view(roi), ForwardContext{Mode::kTrain, &drop});
      return ag::random_projection(out.features, 5);
    });
  });
  // full stage + set loss with frozen matching: every parameter of a one-stage model
  cases.push_back([seed]() {
    std::mt19937_64 rng(seed + 17);
    ModelConfig cfg;
    cfg.num_proposals = 3;
    cfg.channels = 8;
    cfg.hidden = 2;
    cfg.heads = 2;
    cfg.stages = 1;
    cfg.image_width = cfg.image_height = 64;
    cfg.init = ProposalInit::kRandom;
    cfg.seed = seed;
    auto model = make_model<double>(cfg);
    // proposals inside the map: regions pooled from outside it are exactly zero,
    // which parks the DII activations on the ReLU kink
    model.proposal_boxes.value =
        normalize_coordinates<double>({{20, 22, 16, 8, 0.2}, {40, 36, 12, 20, -0.5}, {30, 44, 14, 10, 1.0}}, 64, 64);
    // keep decoded boxes well-formed
    for (auto& v : model.stages[0].reg_out.weight.value.storage()) v *= 0.1;
    auto pyr = detail::random_pyramid(64, cfg.channels, rng);
    GroundTruthScene gts{"g", 64, 64, {{20, 24, 18, 7, 0.3}, {44, 40, 10, 22, -0.7}}, ""};
    const auto sample_at = model.proposal_pixel_boxes();
    SetLossOptions opt;
    std::vector<MatchResult> frozen;
    auto build = [&](G& g, bool freeze) {
      std::mt19937_64 drop(21);
      const ForwardContext ctx{Mode::kTrain, &drop};
      auto levels = nn::pyramid_views(g, pyr);
      StageState<double> st{nn::proposal_box_var(g, model), g.param(model.proposal_obj), g.param(model.proposal_bg),
                            sample_at};
      auto out = nn::detection_head(g, pyr, levels, model.stages[0], cfg, st, ctx);
      auto r = set_loss<double>({{out.logits, out.boxes}}, gts, opt, freeze ? &frozen : nullptr);
      if (!freeze) frozen = r.matches;
      return r.loss;
    };
    {
      G g(false);
      build(g, false);
    }
    return check_parameter_grads("stage + set loss", model.parameters(), [&](G& g) { return build(g, true); },
                                 GradCheckOptions{1e-6, 1e-3, 24, seed});
  });
  return cases;
}

inline std::vector<GradReport> run_gradient_cases(std::uint64_t seed) {
  std::vector<GradReport> out;
  for (const auto& c : gradient_cases(seed)) out.push_back(c());
  return out;
}

inline OracleReport grad_oracle(std::uint64_t seed, double tol = 1e-4) {
  OracleReport r{"grad: finite differences", 0, 0, tol};
  r.passed = true;
  for (const auto& g : run_gradient_cases(seed)) {
    r.trials += g.checked;
    r.max_error = std::max(r.max_error, g.max_rel_error);
    r.passed = r.passed && g.passed(tol);
  }
  return r;
}

// ------------------------------------------------------------------ pooling

/// Dual-context contract: shared level, constant-field reproduction, and a
/// background mean blind to the object crop.
inline OracleReport pool_oracle(std::size_t trials, std::uint64_t seed) {
  OracleReport r{"pool: dual-context contract", trials, 0, 1e-12};
  std::mt19937_64 rng(seed);
  FeaturePyramid<double> flat;
  flat.image_width = flat.image_height = 256;
  for (int l = 2; l <= 5; ++l) {
    const std::size_t n = std::size_t(256 >> l);
    flat.levels.push_back({l, Tensor<double>(Shape{n, n, 2}, 0.75)});
  }
  std::uniform_real_distribution<double> pos(60, 196), size(4, 120), ang(-kHalfPi, kHalfPi);
  bool ok = true;
  for (std::size_t t = 0; t < trials;) {
    const OrientedBox b{pos(rng), pos(rng), size(rng), size(rng), ang(rng)};
    bool inside = true;
    for (const auto& p : box_corners(extend_box(b, kDefaultAlpha)))
      inside = inside && p.x > 0 && p.y > 0 && p.x < 256 && p.y < 256;
    if (!inside) continue;
    ++t;
    const auto f = dual_context_pool(flat, b);
    ok = ok && f.level_index == f.bg_level_index;
    for (const auto* x : {&f.obj, &f.bg, &f.mu_bg})
      for (double v : x->values()) r.max_error = std::max(r.max_error, std::abs(v - 0.75));
  }
  // sentinel in the object crop leaves the ring mean untouched
  Tensor<double> roi(Shape{kExtendedRoiSize, kExtendedRoiSize, 1}, 1.0);
  for (auto k : center_indices(kExtendedRoiSize, kRoiSize)) roi[k] = 1e6;
  r.max_error = std::max(r.max_error, std::abs(split_dual_context(roi).mu_bg[0] - 1.0));
  r.passed = ok && r.max_error <= r.tolerance;
  return r;
}

}  // namespace rsparse
