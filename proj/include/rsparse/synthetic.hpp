// SPDX-License-Identifier: Apache-2.0
//
// Synthetic ship scenes: rotated rectangles on an optional coastline, rendered
// straight into a P2..P5 pseudo-feature pyramid.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rsparse/pooling.hpp"
#include "rsparse/scene.hpp"

namespace rsparse {

struct SyntheticSceneConfig {
  int image_width = 256;
  int image_height = 256;
  int min_ships = 1;
  int max_ships = 4;
  double min_length = 24.0;
  double max_length = 64.0;
  double min_aspect = 2.0;
  double max_aspect = 5.0;
  double min_angle = -kHalfPi;
  double max_angle = kHalfPi;
  double clutter = 0.1;
  double inshore_fraction = 0.5;
  std::size_t channels = 256;
  int min_level = 2;
  int max_level = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_width <= 0 || image_height <= 0) throw Error("synth: image size must be positive");
    if (min_ships < 0 || max_ships < min_ships) throw Error("synth: empty ship count range");
    if (!(min_length > 0 && max_length >= min_length)) throw Error("synth: empty length range");
    if (!(min_aspect >= 1 && max_aspect >= min_aspect)) throw Error("synth: empty aspect range");
    if (!(max_angle > min_angle)) throw Error("synth: empty angle range");
    if (clutter < 0) throw Error("synth: clutter must be >= 0");
    if (channels < kSyntheticFields) throw Error("synth: need at least " + std::to_string(kSyntheticFields) + " channels");
    if (min_level < 2 || max_level > 5 || max_level < min_level) throw Error("synth: levels must lie in P2..P5");
  }

  static constexpr std::size_t kSyntheticFields = 10;
};

/// Geometric fields rendered per cell before the channel projection.
/// 0 occupancy, 1-2 orientation (cos 2t, sin 2t), 3-4 position inside the ship
/// along/across its axis, 5-6 log extent, 7 distance to the hull edge,
/// 8 land, 9 constant.
using SyntheticFields = std::array<double, SyntheticSceneConfig::kSyntheticFields>;

template <class T>
struct SyntheticScene {
  FeaturePyramid<T> pyramid;
  GroundTruthScene truth;
};

inline constexpr std::uint64_t kProjectionSeed = 0x5eed5a4dULL;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

struct Coast {
  bool present = false;
  double nx = 0, ny = 0, offset = 0;  // land where nx*x + ny*y > offset
  bool land(double x, double y) const { return present && nx * x + ny * y > offset; }
};

inline SyntheticFields point_fields(double x, double y, const std::vector<OrientedBox>& ships, const Coast& coast) {
  SyntheticFields f{};
  f[8] = coast.land(x, y) ? 1.0 : 0.0;
  f[9] = 1.0;
  for (const auto& b : ships) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double dx = x - b.cx, dy = y - b.cy;
    const double u = (dx * c + dy * s) / (b.w / 2);
    const double v = (-dx * s + dy * c) / (b.h / 2);
    if (std::abs(u) > 1 || std::abs(v) > 1) continue;
    f[0] = 1.0;
    f[1] = std::cos(2 * b.theta);
    f[2] = std::sin(2 * b.theta);
    f[3] = u;
    f[4] = v;
    f[5] = std::log(b.w / 40.0);
    f[6] = std::log(b.h / 12.0);
    f[7] = 1.0 - std::max(std::abs(u), std::abs(v));
    break;
  }
  return f;
}

}  // namespace detail

/// Fixed [C, K] projection: the first K channels copy the fields, the rest are
/// Gaussian mixtures of them. Shared by every scene.
inline std::vector<double> synthetic_projection(std::size_t channels) {
  constexpr std::size_t K = SyntheticSceneConfig::kSyntheticFields;
  std::vector<double> p(channels * K, 0.0);
  std::mt19937_64 rng(kProjectionSeed);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(double(K)));
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < K; ++k) p[c * K + k] = c < K ? (c == k ? 1.0 : 0.0) : nd(rng);
  return p;
}

inline std::vector<OrientedBox> draw_ships(const SyntheticSceneConfig& cfg, const detail::Coast& coast,
                                           std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(cfg.min_ships, cfg.max_ships);
  std::uniform_real_distribution<double> len(cfg.min_length, cfg.max_length), asp(cfg.min_aspect, cfg.max_aspect),
      ang(cfg.min_angle, cfg.max_angle), unit(0.0, 1.0);
  const int k = count(rng);
  std::vector<OrientedBox> ships;
  for (int i = 0; i < k; ++i) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      OrientedBox b;
      b.w = len(rng);
      b.h = b.w / asp(rng);
      b.theta = ang(rng);
      const double half = b.w / 2;
      b.cx = half + unit(rng) * std::max(0.0, cfg.image_width - 2 * half);
      b.cy = half + unit(rng) * std::max(0.0, cfg.image_height - 2 * half);
      b = normalize_box(b);
      if (coast.land(b.cx, b.cy)) continue;
      bool clear = true;
      for (const auto& o : ships)
        if (intersection_area(b, o) > 0) clear = false;
      if (!clear) continue;
      ships.push_back(b);
      break;
    }
  }
  return ships;
}

/// Renders one scene. Each pyramid cell averages the fields over a 4x4
/// sub-grid of its footprint, projects them to C channels and adds Gaussian
/// noise with standard deviation `clutter` (tripled on land).
template <class T>
SyntheticScene<T> generate_synthetic_scene(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  constexpr std::size_t K = SyntheticSceneConfig::kSyntheticFields;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  detail::Coast coast;
  const bool inshore = unit(rng) < cfg.inshore_fraction;
  if (inshore) {
    const double a = unit(rng) * 2 * kPi;
    coast.present = true;
    coast.nx = std::cos(a);
    coast.ny = std::sin(a);
    // land covers the outer 10-30% of the image along the coast normal
    const double cx = cfg.image_width / 2.0, cy = cfg.image_height / 2.0;
    const double reach = std::abs(coast.nx) * cx + std::abs(coast.ny) * cy;
    coast.offset = coast.nx * cx + coast.ny * cy + reach * (0.4 + 0.4 * unit(rng));
  }
  SyntheticScene<T> scene;
  scene.truth.scene_id = "scene" + std::to_string(cfg.seed);
  scene.truth.image_width = cfg.image_width;
  scene.truth.image_height = cfg.image_height;
  scene.truth.split = inshore ? "inshore" : "offshore";
  scene.truth.boxes = draw_ships(cfg, coast, rng);

  const auto proj = synthetic_projection(cfg.channels);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto& pyr = scene.pyramid;
  pyr.image_width = cfg.image_width;
  pyr.image_height = cfg.image_height;
  constexpr int kSub = 4;
  for (int level = cfg.min_level; level <= cfg.max_level; ++level) {
    const int stride = 1 << level;
    const std::size_t H = static_cast<std::size_t>((cfg.image_height + stride - 1) / stride);
    const std::size_t W = static_cast<std::size_t>((cfg.image_width + stride - 1) / stride);
    FeatureMap<T> map;
    map.level = level;
    map.values = Tensor<T>(Shape{H, W, cfg.channels});
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        SyntheticFields acc{};
        for (int a = 0; a < kSub; ++a)
          for (int b = 0; b < kSub; ++b) {
            const double x = (double(j) + (b + 0.5) / kSub) * stride;
            const double y = (double(i) + (a + 0.5) / kSub) * stride;
            const auto f = detail::point_fields(x, y, scene.truth.boxes, coast);
            for (std::size_t k = 0; k < K; ++k) acc[k] += f[k];
          }
        for (auto& v : acc) v /= kSub * kSub;
        const double sigma = cfg.clutter * (acc[8] > 0.5 ? 3.0 : 1.0);
        T* cell = map.values.data() + (i * W + j) * cfg.channels;
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          double v = 0;
          for (std::size_t k = 0; k < K; ++k) v += proj[c * K + k] * acc[k];
          cell[c] = T(v + (sigma > 0 ? sigma * noise(rng) : 0.0));
        }
      }
    pyr.levels.push_back(std::move(map));
  }
  return scene;
}

/// K scenes with per-scene seeds derived from cfg.seed.
template <class T>
std::vector<SyntheticScene<T>> generate_synthetic_dataset(const SyntheticSceneConfig& cfg, std::size_t count) {
  std::vector<SyntheticScene<T>> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto c = cfg;
    c.seed = mix_seed(cfg.seed, i);
    auto s = generate_synthetic_scene<T>(c);
    s.truth.scene_id = "s" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace rsparse
