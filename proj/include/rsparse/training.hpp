// SPDX-License-Identifier: Apache-2.0
//
// Toy training loop: per-stage set loss over a scene batch, Adam with
// warm-up and clipping, periodic AP evaluation and a line-delimited log.
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "rsparse/detection.hpp"
#include "rsparse/metrics.hpp"
#include "rsparse/optim.hpp"
#include "rsparse/synthetic.hpp"

namespace rsparse {

template <class T>
using LabeledScene = SyntheticScene<T>;

struct TrainConfig {
  ModelConfig model;
  AdamConfig optim;
  SetLossOptions loss;
  std::size_t iterations = 2000;
  std::size_t batch_size = 1;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  std::uint64_t seed = 0;      // data order and dropout
};

struct TrainLogEntry {
  std::size_t iter = 0;
  double loss = 0;  // normalized
  LossBreakdown terms;
  double grad_norm = 0;
  double lr = 0;
  std::optional<CocoSummary> eval;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
  nlohmann::json j{{"iter", e.iter},          {"loss", e.loss},
                   {"cls", e.terms.cls},      {"l1", e.terms.l1},
                   {"iou", e.terms.iou},      {"grad_norm", e.grad_norm},
                   {"lr", e.lr}};
  if (e.eval) {
    j["ap"] = e.eval->ap;
    j["ap50"] = e.eval->ap50;
    j["ap75"] = e.eval->ap75;
  }
  return j;
}

template <class T>
std::vector<EvalScene> predict_dataset(const Model<T>& model, const std::vector<LabeledScene<T>>& data) {
  std::vector<EvalScene> out;
  for (const auto& s : data) out.push_back({infer(s.pyramid, model), s.truth});
  return out;
}

template <class T>
CocoSummary evaluate(const Model<T>& model, const std::vector<LabeledScene<T>>& data, const EvalConfig& cfg = {}) {
  return coco_summary(predict_dataset(model, data), cfg);
}

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<TrainLogEntry> log;
  CocoSummary final_eval;
};

/// Summed set loss of a batch, divided by the matched pairs of one stage
/// summed over the batch (1 when the batch has no ground truth). Gradients
/// accumulate into the model parameters.
template <class T>
std::pair<double, LossBreakdown> batch_loss_backward(const Model<T>& model,
                                                     const std::vector<const LabeledScene<T>*>& batch,
                                                     const SetLossOptions& opt, const ForwardContext& ctx) {
  std::vector<std::unique_ptr<Graph<T>>> graphs;
  std::vector<Var<T>> losses;
  LossBreakdown terms;
  std::size_t matched = 0;
  double total = 0;
  for (const auto* scene : batch) {
    graphs.push_back(std::make_unique<Graph<T>>(true));
    auto& g = *graphs.back();
    auto outs = nn::pipeline(g, scene->pyramid, model, ctx);
    std::vector<StagePrediction<T>> preds;
    for (const auto& o : outs) preds.push_back({o.logits, o.boxes});
    auto r = set_loss(preds, scene->truth, opt);
    matched += r.matched_pairs;
    terms.cls += r.breakdown.cls;
    terms.l1 += r.breakdown.l1;
    terms.iou += r.breakdown.iou;
    total += double(r.loss.value()[0]);
    losses.push_back(r.loss);
  }
  const double norm = matched > 0 ? double(matched) : 1.0;
  if (!std::isfinite(total)) throw DivergenceError("non-finite loss");
  for (std::size_t i = 0; i < graphs.size(); ++i) graphs[i]->backward(losses[i], T(1.0 / norm));
  terms.cls /= norm;
  terms.l1 /= norm;
  terms.iou /= norm;
  return {total / norm, terms};
}

/// Trains every head parameter and the proposal boxes/features. Deterministic
/// for a fixed config and dataset. `log` receives one JSON object per line.
template <class T>
TrainResult<T> train_toy(const TrainConfig& cfg, const std::vector<LabeledScene<T>>& data,
                         std::ostream* log = nullptr) {
  if (data.empty()) throw Error("train: empty dataset");
  if (cfg.batch_size == 0) throw Error("train: batch size must be >= 1");
  TrainResult<T> res{make_model<T>(cfg.model), {}, {}};
  auto params = res.model.parameters();
  Adam<T> opt(params, cfg.optim);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xda7a));
  std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 0xd0));
  const ForwardContext ctx{Mode::kTrain, &dropout_rng};
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<const LabeledScene<T>*> batch;
    for (std::size_t b = 0; b < std::min(cfg.batch_size, data.size()); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    opt.zero_grad();
    TrainLogEntry e;
    e.iter = it;
    try {
      std::tie(e.loss, e.terms) = batch_loss_backward(res.model, batch, cfg.loss, ctx);
    } catch (const DivergenceError& err) {
      throw DivergenceError(std::string(err.what()) + " at iteration " + std::to_string(it));
    }
    e.grad_norm = clip_grad_norm(params, cfg.optim.clip_norm);
    e.lr = cfg.optim.lr_at(it);
    try {
      opt.step(it);
    } catch (const DivergenceError& err) {
      throw DivergenceError(std::string(err.what()) + " at iteration " + std::to_string(it));
    }
    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) e.eval = evaluate(res.model, data);
    if (log) *log << to_json(e).dump() << '\n';
    res.log.push_back(std::move(e));
  }
  opt.zero_grad();
  res.final_eval = evaluate(res.model, data);
  return res;
}

}  // namespace rsparse
