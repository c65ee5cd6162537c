// SPDX-License-Identifier: Apache-2.0
//
// Oriented boxes, exact rotated IoU via convex clipping, and box delta decoding.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "rsparse/dual.hpp"
#include "rsparse/error.hpp"

namespace rsparse {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kHalfPi = std::numbers::pi / 2;

/// Rotated rectangle: center (cx, cy), extents (w, h), angle theta in radians,
/// counter-clockwise from +x.
template <class S>
struct BasicBox {
  S cx{}, cy{}, w{}, h{}, theta{};
};

using OrientedBox = BasicBox<double>;

inline bool operator==(const OrientedBox& a, const OrientedBox& b) {
  return std::tie(a.cx, a.cy, a.w, a.h, a.theta) == std::tie(b.cx, b.cy, b.w, b.h, b.theta);
}

struct BoxDeltas {
  double dx = 0, dy = 0, dw = 0, dh = 0, dtheta = 0;
};

template <class S>
struct BasicPoint {
  S x{}, y{};
};
using Point = BasicPoint<double>;

/// Counter-clockwise convex polygon.
template <class S>
struct BasicPolygon {
  std::vector<BasicPoint<S>> vertices;
};
using ConvexPolygon = BasicPolygon<double>;

/// Cross terms of the position update. kPublished uses +sin in both rows exactly as
/// the published update rule; kOrthogonal is a proper rotation.
enum class DecodeVariant { kPublished, kOrthogonal };

inline constexpr double kDeltaLogClamp = 20.0;
inline constexpr double kClipAreaEpsilon = 1e-12;

inline void validate_box(const OrientedBox& b) {
  if (!(std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h) &&
        std::isfinite(b.theta)))
    throw InvalidBoxError("invalid box: non-finite field");
  if (!(b.w > 0) || !(b.h > 0)) throw InvalidBoxError("invalid box: non-positive dimension");
}

/// Number of quarter turns to subtract from theta to land in [-pi/2, pi/2).
inline long quarter_turns_to_canonical(double theta) {
  long k = 0;
  if (theta >= kHalfPi) {
    k = static_cast<long>(std::floor(theta / kHalfPi));
  } else if (theta < -kHalfPi) {
    k = -static_cast<long>(std::ceil(-1.0 - theta / kHalfPi));
  }
  // floor/ceil can be off by one at representable boundaries
  while (theta - static_cast<double>(k) * kHalfPi >= kHalfPi) ++k;
  while (theta - static_cast<double>(k) * kHalfPi < -kHalfPi) --k;
  return k;
}

/// Same point set with theta in [-pi/2, pi/2). Each quarter turn removed swaps
/// the roles of w and h.
inline OrientedBox normalize_box(const OrientedBox& b) {
  validate_box(b);
  const long k = quarter_turns_to_canonical(b.theta);
  OrientedBox out = b;
  if (k == 0) return out;
  out.theta = b.theta - static_cast<double>(k) * kHalfPi;
  if (out.theta >= kHalfPi) out.theta = -kHalfPi;  // rounding at the open end
  if (k % 2 != 0) std::swap(out.w, out.h);
  return out;
}

template <class S>
std::array<BasicPoint<S>, 4> box_corners(const BasicBox<S>& b) {
  using std::cos;
  using std::sin;
  const S c = cos(b.theta);
  const S s = sin(b.theta);
  const S hw = b.w * S(0.5);
  const S hh = b.h * S(0.5);
  constexpr int sx[4] = {-1, 1, 1, -1};
  constexpr int sy[4] = {-1, -1, 1, 1};
  std::array<BasicPoint<S>, 4> out;
  for (int k = 0; k < 4; ++k) {
    const S ox = hw * S(sx[k]);
    const S oy = hh * S(sy[k]);
    out[k] = {b.cx + c * ox - s * oy, b.cy + s * ox + c * oy};
  }
  return out;
}

/// Corner k = center + R(theta) * (+-w/2, +-h/2), counter-clockwise starting
/// from the (-w/2, -h/2) corner.
inline ConvexPolygon box_to_polygon(const OrientedBox& b) {
  validate_box(b);
  auto corners = box_corners(b);
  return ConvexPolygon{{corners.begin(), corners.end()}};
}

template <class S>
S polygon_area(const std::vector<BasicPoint<S>>& pts) {
  S twice(0);
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pts[i];
    const auto& q = pts[(i + 1) % n];
    twice += p.x * q.y - q.x * p.y;
  }
  return twice * S(0.5);
}

namespace detail {

template <class S>
S edge_side(const BasicPoint<S>& e0, const BasicPoint<S>& e1, const BasicPoint<S>& p) {
  return (e1.x - e0.x) * (p.y - e0.y) - (e1.y - e0.y) * (p.x - e0.x);
}

// Sutherland-Hodgman: clip `subject` against the half-plane left of e0->e1.
template <class S>
std::vector<BasicPoint<S>> clip_half_plane(const std::vector<BasicPoint<S>>& subject,
                                           const BasicPoint<S>& e0, const BasicPoint<S>& e1) {
  std::vector<BasicPoint<S>> out;
  const std::size_t n = subject.size();
  if (n == 0) return out;
  out.reserve(n + 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cur = subject[i];
    const auto& nxt = subject[(i + 1) % n];
    const S sc = edge_side(e0, e1, cur);
    const S sn = edge_side(e0, e1, nxt);
    const bool cur_in = value_of(sc) >= 0;
    const bool nxt_in = value_of(sn) >= 0;
    if (cur_in) out.push_back(cur);
    if (cur_in != nxt_in) {
      const S t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

}  // namespace detail

/// Area of the intersection of two rotated rectangles.
template <class S>
S intersection_area(const BasicBox<S>& a, const BasicBox<S>& b) {
  auto ca = box_corners(a);
  auto cb = box_corners(b);
  std::vector<BasicPoint<S>> poly(ca.begin(), ca.end());
  for (int k = 0; k < 4 && poly.size() >= 3; ++k) {
    poly = detail::clip_half_plane(poly, cb[k], cb[(k + 1) % 4]);
  }
  if (poly.size() < 3) return S(0);
  S area = polygon_area(poly);
  if (value_of(area) < kClipAreaEpsilon) return S(0);
  return area;
}

template <class S>
S rotated_iou_t(const BasicBox<S>& a, const BasicBox<S>& b) {
  const S inter = intersection_area(a, b);
  const S uni = a.w * a.h + b.w * b.h - inter;
  if (value_of(inter) <= 0 || value_of(uni) <= 0) return S(0);
  S iou = inter / uni;
  if (value_of(iou) > 1) return S(1);
  return iou;
}

/// Exact IoU of two rotated boxes in [0, 1]. Arguments are put in a canonical
/// order first so the result is bitwise symmetric.
inline double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  validate_box(a);
  validate_box(b);
  const auto ka = std::tie(a.cx, a.cy, a.w, a.h, a.theta);
  const auto kb = std::tie(b.cx, b.cy, b.w, b.h, b.theta);
  return kb < ka ? rotated_iou_t(b, a) : rotated_iou_t(a, b);
}

/// IoU and its gradient with respect to the five parameters of `a`.
inline std::pair<double, std::array<double, 5>> rotated_iou_grad(const OrientedBox& a,
                                                                 const OrientedBox& b) {
  using D = Dual<double, 5>;
  BasicBox<D> da{D::variable(a.cx, 0), D::variable(a.cy, 1), D::variable(a.w, 2),
                 D::variable(a.h, 3), D::variable(a.theta, 4)};
  BasicBox<D> db{D(b.cx), D(b.cy), D(b.w), D(b.h), D(b.theta)};
  const D iou = rotated_iou_t(da, db);
  return {iou.v, iou.d};
}

/// Applies regression offsets to a proposal and normalizes the result:
///   x' = x + dx*w*cos(t) + dy*h*sin(t)
///   y' = y + dx*w*sin(t) + dy*h*cos(t)
///   w' = w*exp(dw), h' = h*exp(dh), t' = t + dtheta
/// (kOrthogonal negates the first sin term.) dw, dh are clamped to +-20.
inline OrientedBox decode_deltas(const OrientedBox& p, const BoxDeltas& d,
                                 DecodeVariant variant = DecodeVariant::kPublished) {
  validate_box(p);
  if (!(std::isfinite(d.dx) && std::isfinite(d.dy) && std::isfinite(d.dw) &&
        std::isfinite(d.dh) && std::isfinite(d.dtheta)))
    throw InvalidBoxError("invalid deltas: non-finite field");
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  const double sx = variant == DecodeVariant::kPublished ? s : -s;
  OrientedBox out;
  out.cx = p.cx + d.dx * p.w * c + d.dy * p.h * sx;
  out.cy = p.cy + d.dx * p.w * s + d.dy * p.h * c;
  out.w = p.w * std::exp(std::clamp(d.dw, -kDeltaLogClamp, kDeltaLogClamp));
  out.h = p.h * std::exp(std::clamp(d.dh, -kDeltaLogClamp, kDeltaLogClamp));
  out.theta = p.theta + d.dtheta;
  return normalize_box(out);
}

/// Scales the extents by alpha about the center.
inline OrientedBox extend_box(const OrientedBox& b, double alpha) {
  if (!(alpha > 0) || !std::isfinite(alpha)) throw InvalidBoxError("extend_box: alpha must be > 0");
  return {b.cx, b.cy, b.w * alpha, b.h * alpha, b.theta};
}

inline double box_area(const OrientedBox& b) { return b.w * b.h; }

}  // namespace rsparse
