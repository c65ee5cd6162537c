// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>

namespace rsparse {

/// Forward-mode dual number carrying N partial derivatives.
/// Used to differentiate the piecewise-smooth polygon clipping exactly.
template <class T, int N>
struct Dual {
  T v{};
  std::array<T, N> d{};

  Dual() = default;
  Dual(T value) : v(value) {}  // NOLINT(google-explicit-constructor)

  static Dual variable(T value, int index) {
    Dual out(value);
    out.d[index] = T(1);
    return out;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const T inv = T(1) / o.v;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - v * inv * o.d[i]) * inv;
    v *= inv;
    return *this;
  }

  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
  friend Dual operator-(Dual a) {
    a.v = -a.v;
    for (auto& x : a.d) x = -x;
    return a;
  }

  friend Dual cos(const Dual& a) {
    Dual out(std::cos(a.v));
    const T s = -std::sin(a.v);
    for (int i = 0; i < N; ++i) out.d[i] = s * a.d[i];
    return out;
  }
  friend Dual sin(const Dual& a) {
    Dual out(std::sin(a.v));
    const T c = std::cos(a.v);
    for (int i = 0; i < N; ++i) out.d[i] = c * a.d[i];
    return out;
  }
};

inline double value_of(double x) { return x; }
inline float value_of(float x) { return x; }
template <class T, int N>
T value_of(const Dual<T, N>& x) {
  return x.v;
}

}  // namespace rsparse
