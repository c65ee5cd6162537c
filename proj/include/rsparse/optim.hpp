// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay, warm-up schedule and gradient clipping.
#pragma once

#include <cmath>
#include <vector>

#include "rsparse/autograd.hpp"
#include "rsparse/error.hpp"

namespace rsparse {

struct AdamConfig {
  double lr = 7.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::size_t warmup_iters = 50;
  double warmup_factor = 1.0 / 3.0;
  std::vector<std::size_t> decay_at;  // iterations where lr is multiplied by decay_factor
  double decay_factor = 0.1;
  double clip_norm = 1.0;  // <= 0 disables clipping

  double lr_at(std::size_t iter) const {
    double r = iter < warmup_iters ? lr * warmup_factor : lr;
    for (std::size_t d : decay_at)
      if (iter >= d) r *= decay_factor;
    return r;
  }
};

/// Global L2 norm of all gradients, scaled down in place to max_norm if larger.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double sq = 0;
  for (const auto* p : params)
    for (T g : p->grad.values()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = T(max_norm / (norm + 1e-12));
    for (auto* p : params)
      for (T& g : p->grad.storage()) g *= s;
  }
  return norm;
}

template <class T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  /// Applies one update at schedule position `iter`. Non-finite gradients
  /// abort before any parameter is touched.
  void step(std::size_t iter) {
    for (const auto* p : params_)
      if (!p->grad.all_finite()) throw DivergenceError("non-finite gradient in " + p->name);
    ++t_;
    const double lr = cfg_.lr_at(iter);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k]->value.storage();
      const auto& g = params_[k]->grad.storage();
      auto& m = m_[k].storage();
      auto& v = v_[k].storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = T(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi);
        v[i] = T(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi);
        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        w[i] = T(w[i] - lr * (upd + cfg_.weight_decay * w[i]));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace rsparse
