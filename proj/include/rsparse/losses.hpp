// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction losses: sigmoid focal loss, normalized L1 box loss and
// rotated IoU loss, their weighted sum as a matching cost, and the per-stage
// supervised set loss.
#pragma once

#include <cmath>
#include <vector>

#include "rsparse/geometry.hpp"
#include "rsparse/matching.hpp"
#include "rsparse/ops.hpp"
#include "rsparse/scene.hpp"

namespace rsparse {

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double iou = 2.0;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Sigmoid focal loss. log p and log(1 - p) are evaluated as -softplus(-z) and
/// -softplus(z), which never reach log(0).
inline double focal_loss(double logit, int target, FocalParams fp = {}) {
  const double p = sigmoid(logit);
  if (target == 1) return fp.alpha * std::pow(1.0 - p, fp.gamma) * softplus(-logit);
  return (1.0 - fp.alpha) * std::pow(p, fp.gamma) * softplus(logit);
}

/// d focal_loss / d logit.
inline double focal_loss_grad(double logit, int target, FocalParams fp = {}) {
  const double p = sigmoid(logit);
  if (target == 1) {
    const double q = 1.0 - p;
    // alpha (1-p)^g [g p log p - (1-p)]
    return fp.alpha * std::pow(q, fp.gamma) * (-fp.gamma * p * softplus(-logit) - q);
  }
  // (1-alpha) p^g [p - g (1-p) log(1-p)]
  return (1.0 - fp.alpha) * std::pow(p, fp.gamma) * (p + fp.gamma * (1.0 - p) * softplus(logit));
}

/// Per-field scale of the L1 box loss: centers and extents by image size, angle by pi.
inline std::array<double, 5> l1_scales(int image_w, int image_h) {
  return {1.0 / image_w, 1.0 / image_h, 1.0 / image_w, 1.0 / image_h, 1.0 / kPi};
}

inline double angle_difference(double a, double b, bool periodic) {
  double d = a - b;
  if (periodic) {
    d = std::remainder(d, kPi);  // into [-pi/2, pi/2]
  }
  return d;
}

inline double l1_box_loss(const OrientedBox& pred, const OrientedBox& gt, int image_w, int image_h,
                          bool periodic_angle = false) {
  const auto s = l1_scales(image_w, image_h);
  return std::abs(pred.cx - gt.cx) * s[0] + std::abs(pred.cy - gt.cy) * s[1] + std::abs(pred.w - gt.w) * s[2] +
         std::abs(pred.h - gt.h) * s[3] + std::abs(angle_difference(pred.theta, gt.theta, periodic_angle)) * s[4];
}

inline double iou_loss(const OrientedBox& pred, const OrientedBox& gt) { return 1.0 - rotated_iou(pred, gt); }

/// cost(i, j) = w.cls * focal(logit_i, 1) + w.l1 * L1(box_i, gt_j) + w.iou * (1 - IoU(box_i, gt_j)).
inline Tensor<double> matching_cost_matrix(const std::vector<double>& logits, const std::vector<OrientedBox>& boxes,
                                           const GroundTruthScene& gts, const LossWeights& w,
                                           FocalParams fp = {}, bool periodic_angle = false) {
  if (logits.size() != boxes.size()) throw ShapeError("cost matrix: logits/boxes count mismatch");
  Tensor<double> cost(Shape{boxes.size(), gts.boxes.size()});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const double cls = w.cls * focal_loss(logits[i], 1, fp);
    for (std::size_t j = 0; j < gts.boxes.size(); ++j)
      cost.at(i, j) = cls + w.l1 * l1_box_loss(boxes[i], gts.boxes[j], gts.image_width, gts.image_height, periodic_angle) +
                      w.iou * iou_loss(boxes[i], gts.boxes[j]);
  }
  return cost;
}

template <class T>
OrientedBox box_row(const Tensor<T>& boxes, std::size_t i) {
  const T* r = boxes.data() + i * 5;
  return {double(r[0]), double(r[1]), double(r[2]), double(r[3]), double(r[4])};
}

template <class T>
std::vector<OrientedBox> box_rows(const Tensor<T>& boxes) {
  std::vector<OrientedBox> out;
  for (std::size_t i = 0; i < boxes.rows(); ++i) out.push_back(box_row(boxes, i));
  return out;
}

namespace ag {

/// Sum over rows of focal_loss(logits[i], targets[i]) for [N, 1] logits.
template <class T>
Var<T> focal_loss_sum(Var<T> logits, std::vector<int> targets, FocalParams fp = {}) {
  const auto& lv = logits.value();
  if (lv.size() != targets.size()) throw ShapeError("focal_loss_sum: target count mismatch");
  double total = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) total += focal_loss(double(lv[i]), targets[i], fp);
  return logits.graph->make(Tensor<T>(Shape{}, T(total)), logits.requires_grad(),
                            [logits, targets = std::move(targets), fp](Var<T> self) {
                              auto* g = self.graph;
                              const double go = double(g->grad(self)[0]);
                              auto& gl = g->grad(logits);
                              const auto& lv = logits.value();
                              for (std::size_t i = 0; i < gl.size(); ++i)
                                gl[i] += T(go * focal_loss_grad(double(lv[i]), targets[i], fp));
                            });
}

/// Sum of l1_box_loss over rows of pred [M, 5] against gts[M].
template <class T>
Var<T> l1_box_loss_sum(Var<T> pred, std::vector<OrientedBox> gts, int image_w, int image_h,
                       bool periodic_angle = false) {
  const auto& pv = pred.value();
  if (pv.rows() != gts.size() || pv.last_dim() != 5) throw ShapeError("l1_box_loss_sum: shape mismatch");
  double total = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    total += l1_box_loss(box_row(pv, i), gts[i], image_w, image_h, periodic_angle);
  return pred.graph->make(
      Tensor<T>(Shape{}, T(total)), pred.requires_grad(),
      [pred, gts = std::move(gts), image_w, image_h, periodic_angle](Var<T> self) {
        auto* g = self.graph;
        const double go = double(g->grad(self)[0]);
        auto& gp = g->grad(pred);
        const auto& pv = pred.value();
        const auto s = l1_scales(image_w, image_h);
        auto sgn = [](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); };
        for (std::size_t i = 0; i < gts.size(); ++i) {
          const OrientedBox b = box_row(pv, i);
          const double d[5] = {b.cx - gts[i].cx, b.cy - gts[i].cy, b.w - gts[i].w, b.h - gts[i].h,
                               angle_difference(b.theta, gts[i].theta, periodic_angle)};
          for (int k = 0; k < 5; ++k) gp[i * 5 + k] += T(go * sgn(d[k]) * s[k]);
        }
      });
}

/// Sum of (1 - rotated IoU) over rows of pred [M, 5] against gts[M]; the
/// gradient is the exact derivative of the clipped-polygon area.
template <class T>
Var<T> iou_loss_sum(Var<T> pred, std::vector<OrientedBox> gts) {
  const auto& pv = pred.value();
  if (pv.rows() != gts.size() || pv.last_dim() != 5) throw ShapeError("iou_loss_sum: shape mismatch");
  double total = 0;
  auto grads = std::make_shared<std::vector<std::array<double, 5>>>();
  for (std::size_t i = 0; i < gts.size(); ++i) {
    auto [iou, d] = rotated_iou_grad(box_row(pv, i), gts[i]);
    total += 1.0 - iou;
    grads->push_back(d);
  }
  return pred.graph->make(Tensor<T>(Shape{}, T(total)), pred.requires_grad(), [pred, grads](Var<T> self) {
    auto* g = self.graph;
    const double go = double(g->grad(self)[0]);
    auto& gp = g->grad(pred);
    for (std::size_t i = 0; i < grads->size(); ++i)
      for (int k = 0; k < 5; ++k) gp[i * 5 + k] += T(-go * (*grads)[i][k]);
  });
}

}  // namespace ag

/// One stage's predictions on one scene.
template <class T>
struct StagePrediction {
  Var<T> logits;  // [N, 1]
  Var<T> boxes;   // [N, 5]
};

struct LossBreakdown {
  double cls = 0, l1 = 0, iou = 0;  // weighted, before normalization
  double total() const { return cls + l1 + iou; }
};

struct SetLossOptions {
  LossWeights weights;
  FocalParams focal;
  bool periodic_angle = false;
};

template <class T>
struct SetLossResult {
  Var<T> loss;                       // un-normalized weighted sum over stages
  LossBreakdown breakdown;
  std::size_t matched_pairs = 0;     // per stage
  std::vector<MatchResult> matches;  // one per stage
};

/// Matches every stage independently and sums: matched predictions carry all
/// three terms with classification target 1, unmatched ones only the focal
/// term with target 0. `frozen` (optional) replaces the matching step.
template <class T>
SetLossResult<T> set_loss(const std::vector<StagePrediction<T>>& stages, const GroundTruthScene& gts,
                          const SetLossOptions& opt, const std::vector<MatchResult>* frozen = nullptr) {
  if (stages.empty()) throw Error("set_loss: no stages");
  SetLossResult<T> res;
  std::optional<Var<T>> acc;
  auto accumulate = [&](Var<T> v) { acc = acc ? ag::add(*acc, v) : v; };
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const auto& lv = st.logits.value();
    const std::size_t n = lv.rows();
    MatchResult match;
    if (frozen) {
      match = frozen->at(s);
    } else if (!gts.boxes.empty()) {
      std::vector<double> logits(lv.values().begin(), lv.values().end());
      match = hungarian_match(matching_cost_matrix(logits, box_rows(st.boxes.value()), gts, opt.weights,
                                                   opt.focal, opt.periodic_angle));
    } else {
      for (std::size_t i = 0; i < n; ++i) match.unmatched_predictions.push_back(i);
    }
    std::vector<int> targets(n, 0);
    std::vector<std::size_t> pred_idx;
    std::vector<OrientedBox> gt_boxes;
    for (auto [p, t] : match.pairs) {
      targets[p] = 1;
      pred_idx.push_back(p);
      gt_boxes.push_back(gts.boxes.at(t));
    }
    auto cls = ag::scale(ag::focal_loss_sum(st.logits, targets, opt.focal), T(opt.weights.cls));
    res.breakdown.cls += double(cls.value()[0]);
    accumulate(cls);
    if (!pred_idx.empty()) {
      auto matched = ag::gather_rows(st.boxes, pred_idx);
      auto l1 = ag::scale(ag::l1_box_loss_sum(matched, gt_boxes, gts.image_width, gts.image_height, opt.periodic_angle),
                          T(opt.weights.l1));
      auto iou = ag::scale(ag::iou_loss_sum(matched, gt_boxes), T(opt.weights.iou));
      res.breakdown.l1 += double(l1.value()[0]);
      res.breakdown.iou += double(iou.value()[0]);
      accumulate(l1);
      accumulate(iou);
    }
    res.matched_pairs = match.pairs.size();
    res.matches.push_back(std::move(match));
  }
  res.loss = *acc;
  return res;
}

}  // namespace rsparse
