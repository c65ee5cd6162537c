// SPDX-License-Identifier: Apache-2.0
//
// Proposal-RoI interaction: Dynamic Instance Interaction, the object and
// background Interaction Heads, and the Fusion Head.
#pragma once

#include <random>
#include <string>

#include "rsparse/nn.hpp"

namespace rsparse {

inline constexpr double kDefaultDropout = 0.1;

/// Weights for Dynamic Instance Interaction. linear1 generates the per-proposal
/// kernels (C x D followed by D x C); linear2 flattens the S*S x C result to C.
template <class T>
struct DIIParams {
  std::size_t hidden = 64;
  LinearParams<T> linear1;  // C -> 2*C*D
  NormParams<T> norm1;      // over D
  NormParams<T> norm2;      // over C
  LinearParams<T> linear2;  // S*S*C -> C

  DIIParams() = default;
  DIIParams(const std::string& name, std::size_t c, std::size_t d, std::size_t cells, std::mt19937_64& rng)
      : hidden(d),
        linear1(name + ".linear1", c, 2 * c * d, rng),
        norm1(name + ".norm1", d),
        norm2(name + ".norm2", c),
        linear2(name + ".linear2", cells * c, c, rng) {}

  template <class F>
  void visit(F&& f) {
    linear1.visit(f);
    norm1.visit(f);
    norm2.visit(f);
    linear2.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    linear1.visit(f);
    norm1.visit(f);
    norm2.visit(f);
    linear2.visit(f);
  }
};

template <class T>
struct InteractionHeadParams {
  AttentionParams<T> self_attn;
  double dropout = kDefaultDropout;
  NormParams<T> attn_norm;
  DIIParams<T> dii;
  LinearParams<T> ffn1;
  NormParams<T> ffn_norm1;
  LinearParams<T> ffn2;
  NormParams<T> ffn_norm2;

  InteractionHeadParams() = default;
  InteractionHeadParams(const std::string& name, std::size_t c, std::size_t d, std::size_t heads,
                        std::size_t cells, double dropout_rate, std::mt19937_64& rng)
      : self_attn(name + ".self_attn", c, heads, rng),
        dropout(dropout_rate),
        attn_norm(name + ".attn_norm", c),
        dii(name + ".dii", c, d, cells, rng),
        ffn1(name + ".ffn1", c, c, rng),
        ffn_norm1(name + ".ffn_norm1", c),
        ffn2(name + ".ffn2", c, c, rng),
        ffn_norm2(name + ".ffn_norm2", c) {}

  template <class F>
  void visit(F&& f) {
    self_attn.visit(f);
    attn_norm.visit(f);
    dii.visit(f);
    ffn1.visit(f);
    ffn_norm1.visit(f);
    ffn2.visit(f);
    ffn_norm2.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    self_attn.visit(f);
    attn_norm.visit(f);
    dii.visit(f);
    ffn1.visit(f);
    ffn_norm1.visit(f);
    ffn2.visit(f);
    ffn_norm2.visit(f);
  }
};

enum class FusionKind { kCrossAttention, kAddition, kMultiplication };

template <class T>
struct FusionParams {
  AttentionParams<T> cross_attn;
  double dropout = kDefaultDropout;
  NormParams<T> norm;

  FusionParams() = default;
  FusionParams(const std::string& name, std::size_t c, std::size_t heads, double dropout_rate,
               std::mt19937_64& rng)
      : cross_attn(name + ".cross_attn", c, heads, rng), dropout(dropout_rate), norm(name + ".norm", c) {}

  template <class F>
  void visit(F&& f) {
    cross_attn.visit(f);
    norm.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    cross_attn.visit(f);
    norm.visit(f);
  }
};

namespace nn {

/// Per proposal i: kernels P = linear1(p_i) split into P1 [C, D] and P2 [D, C];
/// F1 = ReLU(LN(f_i P1)), F2 = ReLU(LN(F1 P2)), O_i = linear2(flatten(F2)).
template <class T>
Var<T> dynamic_instance_interaction(Graph<T>& g, const DIIParams<T>& p, Var<T> pro, Var<T> roi) {
  const auto& ps = pro.shape();
  const auto& rs = roi.shape();
  if (ps.size() != 2 || rs.size() != 3 || ps[0] != rs[0] || ps[1] != rs[2])
    throw ShapeError("dii: expected p [N, C] and f [N, S*S, C], got " + shape_str(ps) + " and " +
                     shape_str(rs));
  const std::size_t n = ps[0], c = ps[1], d = p.hidden, cells = rs[1];
  if (p.linear1.in() != c || p.linear1.out() != 2 * c * d || p.linear2.in() != cells * c)
    throw ShapeError("dii: parameter shapes do not match inputs");
  auto params = linear(g, p.linear1, pro);
  auto p1 = ag::reshape(ag::slice_last(params, 0, c * d), {n, c, d});
  auto p2 = ag::reshape(ag::slice_last(params, c * d, 2 * c * d), {n, d, c});
  auto f1 = ag::relu(layer_norm(g, p.norm1, ag::bmm(roi, p1)));
  auto f2 = ag::relu(layer_norm(g, p.norm2, ag::bmm(f1, p2)));
  return linear(g, p.linear2, ag::reshape(f2, {n, cells * c}));
}

template <class T>
struct InteractionOutput {
  Var<T> features;     // refined features after the feed-forward layers [N, C]
  Var<T> proposals;    // post-attention proposal features [N, C]
};

/// pro' = LN(pro + Dropout(SelfAttn(pro))); x = DII(pro', roi);
/// features = LN(W2 ReLU(LN(W1 x))).
template <class T>
InteractionOutput<T> interaction_head(Graph<T>& g, const InteractionHeadParams<T>& p, Var<T> pro, Var<T> roi,
                                      const ForwardContext& ctx) {
  auto attn = attention(g, p.self_attn, pro, pro, pro);
  auto pro2 = layer_norm(g, p.attn_norm, ag::add(pro, ag::dropout(attn, p.dropout, ctx)));
  auto x = dynamic_instance_interaction(g, p.dii, pro2, roi);
  auto h = ag::relu(layer_norm(g, p.ffn_norm1, linear(g, p.ffn1, x)));
  auto features = layer_norm(g, p.ffn_norm2, linear(g, p.ffn2, h));
  return {features, pro2};
}

/// Cross-attention fusion: queries and keys from the object features, values
/// from the background features (keys_from_values switches keys to f_bg).
template <class T>
Var<T> fusion_head(Graph<T>& g, const FusionParams<T>& p, Var<T> f_obj, Var<T> f_bg, FusionKind kind,
                   const ForwardContext& ctx, bool keys_from_values = false) {
  ag::require_same_shape(f_obj.shape(), f_bg.shape(), "fusion");
  switch (kind) {
    case FusionKind::kAddition:
      return ag::add(f_obj, f_bg);
    case FusionKind::kMultiplication:
      return ag::mul(f_obj, f_bg);
    case FusionKind::kCrossAttention:
      break;
  }
  auto attn = attention(g, p.cross_attn, f_obj, keys_from_values ? f_bg : f_obj, f_bg);
  return layer_norm(g, p.norm, ag::dropout(attn, p.dropout, ctx));
}

}  // namespace nn

template <class T>
Tensor<T> dynamic_instance_interaction(const Tensor<T>& pro, const Tensor<T>& roi, const DIIParams<T>& p) {
  Graph<T> g(false);
  return nn::dynamic_instance_interaction(g, p, g.view(pro), g.view(roi)).value();
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> interaction_head_forward(const Tensor<T>& pro, const Tensor<T>& roi,
                                                         const InteractionHeadParams<T>& p,
                                                         const ForwardContext& ctx = {}) {
  Graph<T> g(false);
  auto out = nn::interaction_head(g, p, g.view(pro), g.view(roi), ctx);
  return {out.features.value(), out.proposals.value()};
}

template <class T>
Tensor<T> fusion_head_forward(const Tensor<T>& f_obj, const Tensor<T>& f_bg, const FusionParams<T>& p,
                              FusionKind kind = FusionKind::kCrossAttention, const ForwardContext& ctx = {},
                              bool keys_from_values = false) {
  Graph<T> g(false);
  return nn::fusion_head(g, p, g.view(f_obj), g.view(f_bg), kind, ctx, keys_from_values).value();
}

}  // namespace rsparse
