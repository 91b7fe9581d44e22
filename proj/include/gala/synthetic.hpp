#pragma once

// Toy recognition set: one large target shape among smaller shapes of other
// classes on a noisy gradient background. The target's binary mask doubles as
// its importance map.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/rng.hpp"
#include "gala/train.hpp"

namespace gala {

inline constexpr std::array<const char*, 10> kShapeNames{"disk", "square", "triangle", "plus", "ring",
                                                         "diamond", "cross", "frame", "ell", "tee"};

/// Membership test in shape-normalized coordinates (u down, v right, unit half-size).
inline bool shape_contains(std::size_t cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return u >= -0.9 && u <= 0.8 && av <= 0.55 * (u + 0.9);
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.5 * 0.5;
    }
    case 5: return au + av <= 1.0;
    case 6: return std::abs(au - av) <= 0.3 && au <= 0.95 && av <= 0.95;
    case 7: return au <= 0.9 && av <= 0.9 && !(au <= 0.45 && av <= 0.45);
    case 8: return (v >= -0.9 && v <= -0.35 && au <= 0.9) || (u >= 0.35 && u <= 0.9 && av <= 0.9);
    case 9: return (u >= -0.9 && u <= -0.4 && av <= 0.9) || (av <= 0.25 && au <= 0.9);
    default: throw ContractError("shape_contains: class " + std::to_string(cls) + " out of range");
  }
}

struct SyntheticConfig {
  std::size_t count = 5000;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  double target_min = 6.0, target_max = 9.0;        // half-size in pixels
  double distractor_min = 2.5, distractor_max = 4.0;
  std::size_t distractors_min = 2, distractors_max = 3;
  double noise = 0.08;

  nlohmann::json to_json() const {
    return {{"count", count},
            {"size", size},
            {"seed", seed},
            {"target_min", target_min},
            {"target_max", target_max},
            {"distractor_min", distractor_min},
            {"distractor_max", distractor_max},
            {"distractors_min", distractors_min},
            {"distractors_max", distractors_max},
            {"noise", noise}};
  }
};

namespace detail {

inline std::array<double, 3> random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

inline double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

/// A color at least `gap` away from `ref`.
inline std::array<double, 3> contrasting_color(Rng& rng, const std::array<double, 3>& ref, double gap) {
  for (int i = 0; i < 64; ++i) {
    auto c = random_color(rng);
    if (color_distance(c, ref) >= gap) return c;
  }
  return {1.0 - ref[0], 1.0 - ref[1], 1.0 - ref[2]};
}

template <typename Fn>
void stamp_shape(std::size_t cls, double cy, double cx, double half, std::size_t size, Fn&& fn) {
  const auto lo_r = static_cast<std::ptrdiff_t>(std::floor(cy - half - 1)), hi_r = static_cast<std::ptrdiff_t>(std::ceil(cy + half + 1));
  const auto lo_c = static_cast<std::ptrdiff_t>(std::floor(cx - half - 1)), hi_c = static_cast<std::ptrdiff_t>(std::ceil(cx + half + 1));
  for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(lo_r, 0); r <= std::min<std::ptrdiff_t>(hi_r, static_cast<std::ptrdiff_t>(size) - 1); ++r)
    for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(lo_c, 0); c <= std::min<std::ptrdiff_t>(hi_c, static_cast<std::ptrdiff_t>(size) - 1); ++c) {
      const double u = (static_cast<double>(r) + 0.5 - cy) / half;
      const double v = (static_cast<double>(c) + 0.5 - cx) / half;
      if (shape_contains(cls, u, v)) fn(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    }
}

}  // namespace detail

/// Sample `index` of the set; independent of the other samples.
inline Sample make_synthetic_sample(const SyntheticConfig& cfg, std::size_t index) {
  if (cfg.size < 8) throw ContractError("synthetic: size must be at least 8");
  if (!(cfg.target_min > 0 && cfg.target_min <= cfg.target_max && cfg.distractor_min > 0 &&
        cfg.distractor_min <= cfg.distractor_max && cfg.distractors_min <= cfg.distractors_max)) {
    throw ContractError("synthetic: inconsistent size ranges");
  }
  Rng rng = Rng(cfg.seed).fork(index);
  const std::size_t S = cfg.size;
  const double dS = static_cast<double>(S);
  Sample s;
  s.id = "toy_" + std::to_string(index);
  s.label = rng.index(kShapeNames.size());
  s.image = Image(S, S, 3);

  const auto bg0 = detail::random_color(rng), bg1 = detail::random_color(rng);
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double gy = std::sin(angle), gx = std::cos(angle);
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c) {
      const double t = 0.5 + 0.5 * (gy * (static_cast<double>(r) / dS - 0.5) + gx * (static_cast<double>(c) / dS - 0.5));
      for (std::size_t ch = 0; ch < 3; ++ch) s.image.at(r, c, ch) = bg0[ch] * (1.0 - t) + bg1[ch] * t;
    }
  std::array<double, 3> bg_mean{};
  for (std::size_t ch = 0; ch < 3; ++ch) bg_mean[ch] = 0.5 * (bg0[ch] + bg1[ch]);

  const double half = rng.uniform(cfg.target_min, cfg.target_max);
  const double cy = rng.uniform(half, dS - half), cx = rng.uniform(half, dS - half);

  const std::size_t n_distract = cfg.distractors_min + rng.index(cfg.distractors_max - cfg.distractors_min + 1);
  for (std::size_t d = 0; d < n_distract; ++d) {
    std::size_t cls = rng.index(kShapeNames.size() - 1);
    if (cls >= s.label) ++cls;
    const double dh = rng.uniform(cfg.distractor_min, cfg.distractor_max);
    double dy = 0, dx = 0;
    for (int attempt = 0; attempt < 32; ++attempt) {
      dy = rng.uniform(dh, dS - dh);
      dx = rng.uniform(dh, dS - dh);
      if (std::max(std::abs(dy - cy), std::abs(dx - cx)) > half + dh) break;
    }
    const auto col = detail::contrasting_color(rng, bg_mean, 0.35);
    detail::stamp_shape(cls, dy, dx, dh, S, [&](std::size_t r, std::size_t c) {
      for (std::size_t ch = 0; ch < 3; ++ch) s.image.at(r, c, ch) = col[ch];
    });
  }

  Grid<double> mask(S, S, 0.0);
  const auto col = detail::contrasting_color(rng, bg_mean, 0.35);
  detail::stamp_shape(s.label, cy, cx, half, S, [&](std::size_t r, std::size_t c) {
    for (std::size_t ch = 0; ch < 3; ++ch) s.image.at(r, c, ch) = col[ch];
    mask(r, c) = 1.0;
  });

  for (double& v : s.image.data) v = std::clamp(v + rng.normal(0.0, cfg.noise), 0.0, 1.0);
  s.map = mask;
  s.mask = std::move(mask);
  return s;
}

inline Dataset make_synthetic(const SyntheticConfig& cfg) {
  Dataset out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) out.push_back(make_synthetic_sample(cfg, i));
  return out;
}

/// Copy with maps removed (masks kept for evaluation).
inline Dataset strip_maps(Dataset data) {
  for (auto& s : data) s.map.reset();
  return data;
}

}  // namespace gala
