// SPDX-License-Identifier: Apache-2.0
//
// Rotated-box precision/recall and COCO-style average precision.
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "rsparse/geometry.hpp"
#include "rsparse/scene.hpp"

namespace rsparse {

struct EvalConfig {
  std::vector<double> iou_thresholds = default_thresholds();
  std::size_t recall_points = 101;

  static std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back((50.0 + 5.0 * i) / 100.0);
    return t;
  }

  void validate() const {
    if (iou_thresholds.empty()) throw Error("eval: no IoU thresholds");
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
      const double t = iou_thresholds[i];
      if (!(t > 0.0 && t <= 1.0)) throw Error("eval: IoU threshold outside (0, 1]");
      if (i > 0 && !(t > iou_thresholds[i - 1])) throw Error("eval: IoU thresholds must increase");
    }
    if (recall_points < 2) throw Error("eval: need at least two recall points");
  }
};

/// Detections of one scene paired with its ground truth.
struct EvalScene {
  Detections detections;
  GroundTruthScene truth;
};

struct DetectionMatch {
  std::vector<std::size_t> order;  // detection indices by descending score
  std::vector<bool> true_positive; // aligned with order
  std::vector<long> gt_index;      // matched GT per ranked detection, -1 if FP
};

/// Greedy one-to-one matching in score order. Each detection takes the
/// still-unmatched GT with the highest IoU >= iou_t; ties go to the lower index.
inline DetectionMatch match_detections(const Detections& dets, const GroundTruthScene& gts, double iou_t) {
  DetectionMatch m;
  m.order.resize(dets.size());
  std::iota(m.order.begin(), m.order.end(), std::size_t{0});
  std::stable_sort(m.order.begin(), m.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> taken(gts.boxes.size(), false);
  for (std::size_t idx : m.order) {
    long best = -1;
    double best_iou = iou_t;
    for (std::size_t j = 0; j < gts.boxes.size(); ++j) {
      if (taken[j]) continue;
      const double iou = rotated_iou(dets[idx].box, gts.boxes[j]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<long>(j);
        best_iou = iou;
      }
    }
    if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
    m.true_positive.push_back(best >= 0);
    m.gt_index.push_back(best);
  }
  return m;
}

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t num_gt = 0;
};

/// Global score-ranked precision/recall over all scenes.
inline PrCurve pr_curve(const std::vector<EvalScene>& scenes, double iou_t) {
  struct Ranked {
    double score;
    bool tp;
  };
  std::vector<Ranked> ranked;
  PrCurve c;
  for (const auto& s : scenes) {
    c.num_gt += s.truth.boxes.size();
    const auto m = match_detections(s.detections, s.truth, iou_t);
    for (std::size_t k = 0; k < m.order.size(); ++k) ranked.push_back({s.detections[m.order[k]].score, m.true_positive[k]});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  double tp = 0, fp = 0;
  for (const auto& r : ranked) {
    (r.tp ? tp : fp) += 1.0;
    c.precision.push_back(tp / (tp + fp));
    c.recall.push_back(c.num_gt ? tp / static_cast<double>(c.num_gt) : 0.0);
  }
  return c;
}

/// Area under the interpolated PR curve: precision is made monotone from the
/// right and read at recall points r_k = k / (points - 1) at the first rank
/// whose recall reaches r_k (zero past the end of the curve).
inline double interpolated_ap(const PrCurve& c, std::size_t points = 101) {
  if (c.num_gt == 0) throw Error("average precision undefined without ground truth");
  std::vector<double> p = c.precision;
  for (std::size_t i = p.size(); i-- > 1;) p[i - 1] = std::max(p[i - 1], p[i]);
  double sum = 0;
  for (std::size_t k = 0; k < points; ++k) {
    const double r = static_cast<double>(k) / static_cast<double>(points - 1);
    const auto it = std::lower_bound(c.recall.begin(), c.recall.end(), r);
    if (it != c.recall.end()) sum += p[static_cast<std::size_t>(it - c.recall.begin())];
  }
  return sum / static_cast<double>(points);
}

inline double ap_at_threshold(const std::vector<EvalScene>& scenes, double iou_t, std::size_t points = 101) {
  return interpolated_ap(pr_curve(scenes, iou_t), points);
}

struct CocoSummary {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::vector<double> per_threshold;
};

inline CocoSummary coco_summary(const std::vector<EvalScene>& scenes, const EvalConfig& cfg = {}) {
  cfg.validate();
  CocoSummary s;
  for (double t : cfg.iou_thresholds) s.per_threshold.push_back(ap_at_threshold(scenes, t, cfg.recall_points));
  s.ap = std::accumulate(s.per_threshold.begin(), s.per_threshold.end(), 0.0) /
         static_cast<double>(s.per_threshold.size());
  auto at = [&](double t) {
    for (std::size_t i = 0; i < cfg.iou_thresholds.size(); ++i)
      if (std::abs(cfg.iou_thresholds[i] - t) < 1e-12) return s.per_threshold[i];
    return ap_at_threshold(scenes, t, cfg.recall_points);
  };
  s.ap50 = at(0.5);
  s.ap75 = at(0.75);
  return s;
}

/// Scenes whose split tag equals `split`; "all" keeps everything.
inline std::vector<EvalScene> select_split(const std::vector<EvalScene>& scenes, const std::string& split) {
  if (split == "all") return scenes;
  if (split != "inshore" && split != "offshore") throw Error("eval: unknown split '" + split + "'");
  std::vector<EvalScene> out;
  for (const auto& s : scenes)
    if (s.truth.split == split) out.push_back(s);
  return out;
}

}  // namespace rsparse
