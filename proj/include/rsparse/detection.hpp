// SPDX-License-Identifier: Apache-2.0
//
// Background-aware proposals, the stacked detection heads and NMS-free
// inference.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rsparse/interaction.hpp"
#include "rsparse/losses.hpp"
#include "rsparse/pooling.hpp"
#include "rsparse/scene.hpp"

namespace rsparse {

enum class ProposalInit { kCenter, kRandom, kGrid };

struct ModelConfig {
  std::size_t num_proposals = 100;
  std::size_t channels = 256;
  std::size_t hidden = 64;  // DII kernel width D
  std::size_t heads = 8;
  std::size_t stages = 6;
  std::size_t num_classes = 1;
  std::size_t sampling_ratio = kDefaultSamplingRatio;
  double alpha = kDefaultAlpha;
  double dropout = kDefaultDropout;
  ProposalInit init = ProposalInit::kCenter;
  FusionKind fusion = FusionKind::kCrossAttention;
  PoolingKind pooling = PoolingKind::kDualContext;
  DecodeVariant decode = DecodeVariant::kPublished;
  bool fusion_keys_from_values = false;
  int image_width = 256;
  int image_height = 256;
  std::uint64_t seed = 0;
};

/// Prior probability used for the classification bias at initialization.
inline constexpr double kClassPrior = 0.01;

template <class T>
struct BackgroundAwareProposals {
  std::vector<OrientedBox> boxes;
  Tensor<T> obj_feats;  // [N, C]
  Tensor<T> bg_feats;   // [N, C]
};

/// Initial proposal boxes.
///   center: every box (W/2, H/2, W/4, H/2, pi/4)
///   grid:   ceil(sqrt(n))^2 lattice of cell centers (row-major, truncated to
///           n) with the center-rule size and angle
///   random: centers ~ N(image center, image/4), sizes log-normal around the
///           center-rule size, angle ~ U[-pi/2, pi/2), clamped to the image
inline std::vector<OrientedBox> init_proposal_boxes(ProposalInit strategy, std::size_t n, int image_w, int image_h,
                                                    std::uint64_t seed) {
  if (n == 0) throw Error("init_proposals: need at least one proposal");
  const double W = image_w, H = image_h;
  const OrientedBox base{W / 2, H / 2, W / 4, H / 2, kPi / 4};
  std::vector<OrientedBox> boxes;
  boxes.reserve(n);
  switch (strategy) {
    case ProposalInit::kCenter:
      boxes.assign(n, base);
      break;
    case ProposalInit::kGrid: {
      const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t row = k / side, col = k % side;
        OrientedBox b = base;
        b.cx = (static_cast<double>(col) + 0.5) * W / static_cast<double>(side);
        b.cy = (static_cast<double>(row) + 0.5) * H / static_cast<double>(side);
        boxes.push_back(b);
      }
      break;
    }
    case ProposalInit::kRandom: {
      std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
      std::normal_distribution<double> nx(W / 2, W / 4), ny(H / 2, H / 4), ls(0.0, 0.5);
      std::uniform_real_distribution<double> ang(-kHalfPi, kHalfPi);
      for (std::size_t k = 0; k < n; ++k) {
        OrientedBox b;
        b.cx = std::clamp(nx(rng), 0.0, W);
        b.cy = std::clamp(ny(rng), 0.0, H);
        b.w = std::clamp(base.w * std::exp(ls(rng)), 1.0, W);
        b.h = std::clamp(base.h * std::exp(ls(rng)), 1.0, H);
        b.theta = ang(rng);
        boxes.push_back(b);
      }
      break;
    }
  }
  return boxes;
}

template <class T>
BackgroundAwareProposals<T> init_proposals(ProposalInit strategy, std::size_t n, int image_w, int image_h,
                                           std::uint64_t seed, std::size_t channels = 256) {
  BackgroundAwareProposals<T> p;
  p.boxes = init_proposal_boxes(strategy, n, image_w, image_h, seed);
  std::mt19937_64 rng(seed);
  p.obj_feats = Tensor<T>(Shape{n, channels});
  p.bg_feats = Tensor<T>(Shape{n, channels});
  xavier_fill(p.obj_feats, rng);
  xavier_fill(p.bg_feats, rng);
  return p;
}

template <class T>
Tensor<T> boxes_to_tensor(const std::vector<OrientedBox>& boxes) {
  Tensor<T> t(Shape{boxes.size(), 5});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    T* r = t.data() + i * 5;
    r[0] = T(b.cx);
    r[1] = T(b.cy);
    r[2] = T(b.w);
    r[3] = T(b.h);
    r[4] = T(b.theta);
  }
  return t;
}

/// Pixel boxes to image-relative rows (cx/W, cy/H, w/W, h/H, theta).
template <class T>
Tensor<T> normalize_coordinates(const std::vector<OrientedBox>& boxes, int image_w, int image_h) {
  Tensor<T> t = boxes_to_tensor<T>(boxes);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t[i * 5 + 0] /= T(image_w);
    t[i * 5 + 1] /= T(image_h);
    t[i * 5 + 2] /= T(image_w);
    t[i * 5 + 3] /= T(image_h);
  }
  return t;
}

template <class T>
Tensor<T> coordinate_scale(std::size_t n, int image_w, int image_h) {
  Tensor<T> s(Shape{n, 5});
  for (std::size_t i = 0; i < n; ++i) {
    s[i * 5 + 0] = T(image_w);
    s[i * 5 + 1] = T(image_h);
    s[i * 5 + 2] = T(image_w);
    s[i * 5 + 3] = T(image_h);
    s[i * 5 + 4] = T(1);
  }
  return s;
}

template <class T>
struct DetectionHeadParams {
  InteractionHeadParams<T> obj_head;
  InteractionHeadParams<T> bg_head;
  FusionParams<T> fusion;
  LinearParams<T> cls_fc;
  NormParams<T> cls_norm;
  LinearParams<T> cls_out;
  LinearParams<T> reg_fc;
  NormParams<T> reg_norm;
  LinearParams<T> reg_out;

  DetectionHeadParams() = default;
  DetectionHeadParams(const std::string& name, const ModelConfig& cfg, std::mt19937_64& rng)
      : obj_head(name + ".obj_head", cfg.channels, cfg.hidden, cfg.heads, kRoiSize * kRoiSize, cfg.dropout, rng),
        bg_head(name + ".bg_head", cfg.channels, cfg.hidden, cfg.heads, kRoiSize * kRoiSize, cfg.dropout, rng),
        fusion(name + ".fusion", cfg.channels, cfg.heads, cfg.dropout, rng),
        cls_fc(name + ".cls_fc", cfg.channels, cfg.channels, rng),
        cls_norm(name + ".cls_norm", cfg.channels),
        cls_out(name + ".cls_out", cfg.channels, cfg.num_classes, rng),
        reg_fc(name + ".reg_fc", cfg.channels, cfg.channels, rng),
        reg_norm(name + ".reg_norm", cfg.channels),
        reg_out(name + ".reg_out", cfg.channels, 5, rng) {
    cls_out.bias.value.fill(T(-std::log((1.0 - kClassPrior) / kClassPrior)));
  }

  template <class F>
  void visit(F&& f) {
    obj_head.visit(f);
    bg_head.visit(f);
    fusion.visit(f);
    for (auto* l : {&cls_fc, &cls_out, &reg_fc, &reg_out}) l->visit(f);
    cls_norm.visit(f);
    reg_norm.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    obj_head.visit(f);
    bg_head.visit(f);
    fusion.visit(f);
    for (const auto* l : {&cls_fc, &cls_out, &reg_fc, &reg_out}) l->visit(f);
    cls_norm.visit(f);
    reg_norm.visit(f);
  }
};

/// Complete head: learnable background-aware proposals plus the stage stack.
template <class T>
struct Model {
  ModelConfig config;
  Parameter<T> proposal_boxes;  // [N, 5] (cx/W, cy/H, w/W, h/H, theta)
  Parameter<T> proposal_obj;    // [N, C]
  Parameter<T> proposal_bg;     // [N, C]
  std::vector<DetectionHeadParams<T>> stages;

  template <class F>
  void visit(F&& f) {
    f(proposal_boxes);
    f(proposal_obj);
    f(proposal_bg);
    for (auto& s : stages) s.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    f(proposal_boxes);
    f(proposal_obj);
    f(proposal_bg);
    for (const auto& s : stages) s.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  /// Learnable proposal boxes in pixels.
  std::vector<OrientedBox> proposal_pixel_boxes() const {
    const auto& v = proposal_boxes.value;
    std::vector<OrientedBox> out;
    for (std::size_t i = 0; i < v.rows(); ++i) {
      const T* r = v.data() + i * 5;
      out.push_back({double(r[0]) * config.image_width, double(r[1]) * config.image_height,
                     double(r[2]) * config.image_width, double(r[3]) * config.image_height, double(r[4])});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const Parameter<T>& p) { n += p.value.size(); });
    return n;
  }
};

template <class T>
Model<T> make_model(const ModelConfig& cfg) {
  if (cfg.stages == 0) throw Error("model: stack depth must be >= 1");
  if (cfg.channels % cfg.heads != 0) throw Error("model: channels must be divisible by heads");
  Model<T> m;
  m.config = cfg;
  auto props = init_proposals<T>(cfg.init, cfg.num_proposals, cfg.image_width, cfg.image_height, cfg.seed, cfg.channels);
  m.proposal_boxes = Parameter<T>("proposals.boxes", normalize_coordinates<T>(props.boxes, cfg.image_width, cfg.image_height));
  m.proposal_obj = Parameter<T>("proposals.obj", std::move(props.obj_feats));
  m.proposal_bg = Parameter<T>("proposals.bg", std::move(props.bg_feats));
  std::mt19937_64 rng(cfg.seed + 1);
  for (std::size_t s = 0; s < cfg.stages; ++s) m.stages.emplace_back("stage" + std::to_string(s), cfg, rng);
  return m;
}

namespace ag {

/// Applies [N, 5] deltas to [N, 5] base boxes and normalizes the angle; the
/// gradient follows the quarter-turn w/h swap of the normalization.
template <class T>
Var<T> decode_boxes(Var<T> base, Var<T> deltas, DecodeVariant variant = DecodeVariant::kPublished) {
  const auto& bv = base.value();
  const auto& dv = deltas.value();
  if (bv.shape() != dv.shape() || bv.last_dim() != 5) throw ShapeError("decode_boxes: expected matching [N, 5]");
  const std::size_t n = bv.rows();
  Tensor<T> out(bv.shape());
  auto swapped = std::make_shared<std::vector<char>>(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* b = bv.data() + i * 5;
    const T* d = dv.data() + i * 5;
    const OrientedBox p{double(b[0]), double(b[1]), double(b[2]), double(b[3]), double(b[4])};
    const BoxDeltas del{double(d[0]), double(d[1]), double(d[2]), double(d[3]), double(d[4])};
    const OrientedBox r = decode_deltas(p, del, variant);
    const double raw_theta = p.theta + del.dtheta;
    (*swapped)[i] = quarter_turns_to_canonical(raw_theta) % 2 != 0;
    T* o = out.data() + i * 5;
    o[0] = T(r.cx);
    o[1] = T(r.cy);
    o[2] = T(r.w);
    o[3] = T(r.h);
    o[4] = T(r.theta);
  }
  const bool rg = base.requires_grad() || deltas.requires_grad();
  return base.graph->make(std::move(out), rg, [base, deltas, swapped, variant, n](Var<T> self) {
    auto* g = self.graph;
    const auto& go = g->grad(self);
    const auto& bv = base.value();
    const auto& dv = deltas.value();
    Tensor<T>* gb = base.requires_grad() ? &g->grad(base) : nullptr;
    Tensor<T>* gd = deltas.requires_grad() ? &g->grad(deltas) : nullptr;
    const double sgn = variant == DecodeVariant::kPublished ? 1.0 : -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* b = bv.data() + i * 5;
      const T* d = dv.data() + i * 5;
      const double w = b[2], h = b[3], th = b[4];
      const double dx = d[0], dy = d[1];
      const double c = std::cos(th), s = std::sin(th);
      const double ew = std::exp(std::clamp(double(d[2]), -kDeltaLogClamp, kDeltaLogClamp));
      const double eh = std::exp(std::clamp(double(d[3]), -kDeltaLogClamp, kDeltaLogClamp));
      const double gx = go[i * 5 + 0], gy = go[i * 5 + 1], gt = go[i * 5 + 4];
      double gw = go[i * 5 + 2], gh = go[i * 5 + 3];
      if ((*swapped)[i]) std::swap(gw, gh);
      if (gb) {
        T* r = gb->data() + i * 5;
        r[0] += T(gx);
        r[1] += T(gy);
        r[2] += T(gx * dx * c + gy * dx * s + gw * ew);
        r[3] += T(gx * dy * sgn * s + gy * dy * c + gh * eh);
        r[4] += T(gx * (-dx * w * s + dy * h * sgn * c) + gy * (dx * w * c - dy * h * s) + gt);
      }
      if (gd) {
        T* r = gd->data() + i * 5;
        r[0] += T(gx * w * c + gy * w * s);
        r[1] += T(gx * h * sgn * s + gy * h * c);
        if (std::abs(double(d[2])) < kDeltaLogClamp) r[2] += T(gw * w * ew);
        if (std::abs(double(d[3])) < kDeltaLogClamp) r[3] += T(gh * h * eh);
        r[4] += T(gt);
      }
    }
  });
}

}  // namespace ag

template <class T>
struct StageState {
  Var<T> boxes;  // [N, 5]
  Var<T> obj;    // [N, C]
  Var<T> bg;     // [N, C]
  std::optional<std::vector<OrientedBox>> sample_at;  // pooling boxes; defaults to boxes' values
};

template <class T>
struct StageOutput {
  Var<T> logits;  // [N, num_classes]
  Var<T> boxes;   // [N, 5], normalized
  Var<T> obj;     // object interaction features carried to the next stage
  Var<T> bg;      // background interaction features carried to the next stage
  std::vector<int> obj_levels;
  std::vector<int> bg_levels;
};

namespace nn {

/// One detection head: pooling at the (detached) input boxes, the two
/// interaction heads, fusion, classification and box regression.
template <class T>
StageOutput<T> detection_head(Graph<T>& g, const FeaturePyramid<T>& pyr, const std::vector<Var<T>>& levels,
                              const DetectionHeadParams<T>& p, const ModelConfig& cfg, const StageState<T>& in,
                              const ForwardContext& ctx) {
  const auto pool_boxes = in.sample_at ? *in.sample_at : box_rows(in.boxes.value());
  auto pooled = cfg.pooling == PoolingKind::kDualContext
                    ? dual_context_pool(pyr, levels, pool_boxes, cfg.alpha, cfg.sampling_ratio)
                    : separate_pool(pyr, levels, pool_boxes, cfg.alpha, cfg.sampling_ratio);
  auto obj = interaction_head(g, p.obj_head, in.obj, pooled.obj, ctx);
  auto bg = interaction_head(g, p.bg_head, in.bg, pooled.bg, ctx);
  auto fused = fusion_head(g, p.fusion, obj.features, bg.features, cfg.fusion, ctx, cfg.fusion_keys_from_values);
  auto cls_h = ag::relu(layer_norm(g, p.cls_norm, linear(g, p.cls_fc, fused)));
  auto logits = linear(g, p.cls_out, cls_h);
  auto reg_h = ag::relu(layer_norm(g, p.reg_norm, linear(g, p.reg_fc, fused)));
  auto deltas = linear(g, p.reg_out, reg_h);
  StageOutput<T> out;
  out.logits = logits;
  out.boxes = ag::decode_boxes(in.boxes, deltas, cfg.decode);
  out.obj = obj.features;
  out.bg = bg.features;
  out.obj_levels = std::move(pooled.obj_levels);
  out.bg_levels = std::move(pooled.bg_levels);
  return out;
}

/// The learnable proposal boxes scaled to pixels.
template <class T>
Var<T> proposal_box_var(Graph<T>& g, const Model<T>& model) {
  const auto n = model.proposal_boxes.value.rows();
  return ag::mul(g.param(model.proposal_boxes),
                 g.constant(coordinate_scale<T>(n, model.config.image_width, model.config.image_height)));
}

/// Runs the stack. Stage 0 consumes the learnable proposals; stage t consumes
/// stage t-1's boxes (detached) and interaction features.
template <class T>
std::vector<StageOutput<T>> pipeline(Graph<T>& g, const FeaturePyramid<T>& pyr, const Model<T>& model,
                                     const ForwardContext& ctx) {
  auto levels = pyramid_views(g, pyr);
  StageState<T> state{proposal_box_var(g, model), g.param(model.proposal_obj), g.param(model.proposal_bg), std::nullopt};
  std::vector<StageOutput<T>> outs;
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    outs.push_back(detection_head(g, pyr, levels, model.stages[s], model.config, state, ctx));
    state = {g.constant(outs.back().boxes.value()), outs.back().obj, outs.back().bg, std::nullopt};
  }
  return outs;
}

}  // namespace nn

template <class T>
Detections to_detections(const Tensor<T>& logits, const Tensor<T>& boxes, std::optional<double> threshold = {}) {
  Detections d;
  for (std::size_t i = 0; i < boxes.rows(); ++i) {
    Detection det{box_row(boxes, i), sigmoid(double(logits.at(i, 0))), true};
    if (threshold) det.keep = det.score >= *threshold;
    d.push_back(det);
  }
  return d;
}

template <class T>
struct HeadResult {
  Tensor<T> logits;
  std::vector<OrientedBox> boxes;
  Tensor<T> next_obj;
  Tensor<T> next_bg;
};

template <class T>
HeadResult<T> detection_head_forward(const FeaturePyramid<T>& pyr, const BackgroundAwareProposals<T>& props,
                                     const DetectionHeadParams<T>& params, const ModelConfig& cfg,
                                     const ForwardContext& ctx = {}) {
  Graph<T> g(false);
  auto levels = nn::pyramid_views(g, pyr);
  StageState<T> in{g.constant(boxes_to_tensor<T>(props.boxes)), g.view(props.obj_feats), g.view(props.bg_feats),
                   std::nullopt};
  auto out = nn::detection_head(g, pyr, levels, params, cfg, in, ctx);
  return {out.logits.value(), box_rows(out.boxes.value()), out.obj.value(), out.bg.value()};
}

template <class T>
struct PipelineResult {
  std::vector<std::pair<Tensor<T>, std::vector<OrientedBox>>> stages;  // (logits, boxes) per stage
  Detections detections;
};

namespace detail {

// No-grad forward one stage at a time; each stage's graph is dropped before
// the next one starts, so peak memory is that of a single stage.
template <class T>
std::vector<HeadResult<T>> staged_forward(const FeaturePyramid<T>& pyr, const Model<T>& model,
                                          const ForwardContext& ctx) {
  BackgroundAwareProposals<T> props;
  {
    Graph<T> g(false);
    props.boxes = box_rows(nn::proposal_box_var(g, model).value());
  }
  props.obj_feats = model.proposal_obj.value;
  props.bg_feats = model.proposal_bg.value;
  std::vector<HeadResult<T>> outs;
  for (const auto& stage : model.stages) {
    outs.push_back(detection_head_forward(pyr, props, stage, model.config, ctx));
    props.boxes = outs.back().boxes;
    props.obj_feats = outs.back().next_obj;
    props.bg_feats = outs.back().next_bg;
  }
  return outs;
}

}  // namespace detail

template <class T>
PipelineResult<T> pipeline_forward(const FeaturePyramid<T>& pyr, const Model<T>& model, const ForwardContext& ctx = {}) {
  const auto outs = detail::staged_forward(pyr, model, ctx);
  PipelineResult<T> r;
  for (const auto& o : outs) r.stages.emplace_back(o.logits, o.boxes);
  r.detections = to_detections(outs.back().logits, boxes_to_tensor<T>(outs.back().boxes));
  return r;
}

/// Eval-mode forward returning all N scored boxes; no suppression of any kind.
/// The threshold only sets the keep flag.
template <class T>
Detections infer(const FeaturePyramid<T>& pyr, const Model<T>& model, std::optional<double> score_threshold = {}) {
  const auto outs = detail::staged_forward(pyr, model, ForwardContext{Mode::kEval, nullptr});
  return to_detections(outs.back().logits, boxes_to_tensor<T>(outs.back().boxes), score_threshold);
}

}  // namespace rsparse
