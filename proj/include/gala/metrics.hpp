#pragma once

// Interpretability and significance tools: SmoothGrad, gradient deltas,
// attention/segmentation IOU with count equalization, randomization tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "gala/autodiff.hpp"
#include "gala/backbone.hpp"
#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/rng.hpp"

namespace gala {

// ---------------------------------------------------------------------------
// SmoothGrad.

/// Builds N x K logits from an input node.
using LogitBuilder = std::function<Graph::NodeId(Graph&, Graph::NodeId)>;

struct SmoothGradOptions {
  std::size_t n_samples = 25;
  double noise_sigma = 0.1;  // in pixel-value units; images live in [0, 1]
  std::uint64_t seed = 0;
};

/// Mean over noisy copies of |d logit[label] / d pixel|, max over channels.
inline Grid<double> smoothgrad(const LogitBuilder& logits_of, const Image& image, std::size_t label,
                               const SmoothGradOptions& opts = {}) {
  if (opts.n_samples == 0) throw ContractError("smoothgrad: n_samples must be positive");
  if (!(opts.noise_sigma >= 0.0)) throw ContractError("smoothgrad: noise_sigma must be nonnegative");
  Rng rng(opts.seed);
  Grid<double> acc(image.height, image.width, 0.0);
  for (std::size_t s = 0; s < opts.n_samples; ++s) {
    std::vector<double> noisy = image.data;
    if (opts.noise_sigma > 0.0)
      for (double& v : noisy) v += rng.normal(0.0, opts.noise_sigma);
    Graph g;
    const auto x = g.parameter(Tensor(Shape{1, image.height, image.width, image.channels}, std::move(noisy)));
    const auto logits = logits_of(g, x);
    const Shape ls = g.value(logits).shape();
    if (ls.rank() != 2 || ls[0] != 1 || label >= ls[1]) {
      throw ContractError("smoothgrad: expected 1 x K logits with label < K, got " + ls.str());
    }
    std::vector<double> pick(ls[1], 0.0);
    pick[label] = 1.0;
    const auto target = g.sum(g.mul(logits, g.constant(Tensor(ls, std::move(pick)))));
    const Tensor grad = g.backward(target).of(x);
    if (!grad.all_finite()) throw NumericError("smoothgrad: non-finite gradient");
    for (std::size_t i = 0; i < acc.size(); ++i) {
      double m = 0.0;
      for (std::size_t c = 0; c < image.channels; ++c) m = std::max(m, std::abs(grad[i * image.channels + c]));
      acc[i] += m;
    }
  }
  for (double& v : acc.values()) v /= static_cast<double>(opts.n_samples);
  return acc;
}

inline Grid<double> smoothgrad(const Model& model, const Image& image, std::size_t label,
                               const SmoothGradOptions& opts = {}) {
  return smoothgrad(
      [&model](Graph& g, Graph::NodeId x) {
        const auto ids = attach(g, model, false);
        return build_forward(g, model, x, ids).logits;
      },
      image, label, opts);
}

/// Max-normalizes both maps to [0, 1] and subtracts; positive where g1 dominates.
inline Grid<double> gradient_delta(const Grid<double>& g1, const Grid<double>& g2) {
  if (!g1.same_shape(g2)) throw ContractError("gradient_delta: shapes differ");
  auto normalized = [](const Grid<double>& g, const char* which) {
    double m = 0.0;
    for (double v : g.values()) {
      if (v < 0.0) throw ContractError(std::string("gradient_delta: ") + which + " has negative values");
      m = std::max(m, v);
    }
    if (m == 0.0) throw ContractError(std::string("gradient_delta: ") + which + " is all zero");
    Grid<double> out = g;
    for (double& v : out.values()) v /= m;
    return out;
  };
  const auto a = normalized(g1, "g1"), b = normalized(g2, "g2");
  Grid<double> out(g1.height(), g1.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// ---------------------------------------------------------------------------
// IOU.

/// (v - min) / (max - min); a constant map becomes all zeros.
inline Grid<double> minmax_normalize(const Grid<double>& g) {
  if (g.empty()) throw ContractError("minmax_normalize: empty map");
  const auto [lo, hi] = std::minmax_element(g.values().begin(), g.values().end());
  Grid<double> out(g.height(), g.width(), 0.0);
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = (g[i] - *lo) / range;
  return out;
}

/// Indices with normalized score > threshold.
inline std::vector<std::size_t> above_threshold(const Grid<double>& normalized, double threshold) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < normalized.size(); ++i)
    if (normalized[i] > threshold) idx.push_back(i);
  return idx;
}

/// Keeps the k highest-scoring indices; equal scores keep the lower index.
inline std::vector<std::size_t> keep_top(std::vector<std::size_t> idx, const Grid<double>& scores, std::size_t k) {
  if (idx.size() <= k) return idx;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double set_iou(const std::vector<std::size_t>& selected, const Grid<double>& mask) {
  std::size_t mask_count = 0, inter = 0;
  for (double v : mask.values())
    if (v > 0.5) ++mask_count;
  if (mask_count == 0) throw ContractError("attention_iou: empty mask");
  for (auto i : selected)
    if (mask[i] > 0.5) ++inter;
  const std::size_t uni = selected.size() + mask_count - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline void check_mask(const Grid<double>& mask) {
  for (double v : mask.values())
    if (v != 0.0 && v != 1.0) throw ContractError("attention_iou: mask must be binary");
}

/// Single map: min-max normalize, threshold, IOU with the mask.
inline double attention_iou(const Grid<double>& attn, const Grid<double>& mask, double threshold = 0.5) {
  if (!attn.same_shape(mask)) throw ContractError("attention_iou: attention and mask shapes differ");
  check_mask(mask);
  const auto n = minmax_normalize(attn);
  return set_iou(above_threshold(n, threshold), mask);
}

struct IouPair {
  double first = 0.0, second = 0.0;
};

/// Two models' maps for one image: the larger above-threshold set is cut to the
/// smaller's size (highest scores kept) before scoring each against the mask.
inline IouPair attention_iou(const Grid<double>& attn, const Grid<double>& mask, const Grid<double>& other_attn,
                             double threshold = 0.5) {
  if (!attn.same_shape(mask) || !other_attn.same_shape(mask)) {
    throw ContractError("attention_iou: attention and mask shapes differ");
  }
  check_mask(mask);
  const auto n1 = minmax_normalize(attn), n2 = minmax_normalize(other_attn);
  auto s1 = above_threshold(n1, threshold), s2 = above_threshold(n2, threshold);
  const std::size_t k = std::min(s1.size(), s2.size());
  s1 = keep_top(std::move(s1), n1, k);
  s2 = keep_top(std::move(s2), n2, k);
  return {set_iou(s1, mask), set_iou(s2, mask)};
}

// ---------------------------------------------------------------------------
// Randomization tests. One-sided: p = share of null statistics >= observed.

struct RandomizationResult {
  double p_value = 1.0;
  double observed = 0.0;
  std::size_t iterations = 0;  // statistics in the null distribution
  bool exhaustive = false;
};

namespace detail {

inline bool at_least(double stat, double observed) {
  return stat >= observed - 1e-12 * (1.0 + std::abs(observed));
}

inline double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace detail

/// Paired differences; statistic = mean. Enumerates all 2^n sign patterns
/// when that is no more than `iterations`.
inline RandomizationResult sign_flip_test(std::span<const double> diffs, std::size_t iterations = 10000,
                                          std::uint64_t seed = 0) {
  if (diffs.empty()) throw ContractError("sign_flip_test: empty data");
  if (iterations == 0) throw ContractError("sign_flip_test: iterations must be positive");
  RandomizationResult r;
  r.observed = detail::mean_of(diffs);
  const std::size_t n = diffs.size();
  std::size_t hits = 0;
  if (n < 63 && (std::uint64_t{1} << n) <= iterations) {
    r.exhaustive = true;
    r.iterations = std::size_t{1} << n;
    for (std::uint64_t pattern = 0; pattern < r.iterations; ++pattern) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += ((pattern >> i) & 1U) ? -diffs[i] : diffs[i];
      if (detail::at_least(s / static_cast<double>(n), r.observed)) ++hits;
    }
  } else {
    Rng rng(seed);
    r.iterations = iterations;
    for (std::size_t it = 0; it < iterations; ++it) {
      double s = 0.0;
      for (double d : diffs) s += rng.coin() ? -d : d;
      if (detail::at_least(s / static_cast<double>(n), r.observed)) ++hits;
    }
  }
  r.p_value = static_cast<double>(hits) / static_cast<double>(r.iterations);
  return r;
}

namespace detail {

inline double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

}  // namespace detail

/// Two independent groups; statistic = mean(a) - mean(b). Enumerates every
/// relabelling when the count is no more than `iterations`.
inline RandomizationResult group_swap_test(std::span<const double> a, std::span<const double> b,
                                           std::size_t iterations = 10000, std::uint64_t seed = 0) {
  if (a.empty() || b.empty()) throw ContractError("group_swap_test: empty data");
  if (iterations == 0) throw ContractError("group_swap_test: iterations must be positive");
  RandomizationResult r;
  r.observed = detail::mean_of(a) - detail::mean_of(b);
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = pooled.size(), na = a.size();
  const double total = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  auto stat = [&](double sum_a) {
    return sum_a / static_cast<double>(na) - (total - sum_a) / static_cast<double>(n - na);
  };
  std::size_t hits = 0;
  if (detail::binomial(n, na) <= static_cast<double>(iterations)) {
    r.exhaustive = true;
    std::vector<std::size_t> pick(na);
    std::iota(pick.begin(), pick.end(), 0);
    for (;;) {
      double s = 0.0;
      for (auto i : pick) s += pooled[i];
      if (detail::at_least(stat(s), r.observed)) ++hits;
      ++r.iterations;
      // Next combination in lexicographic order.
      std::size_t i = na;
      while (i > 0 && pick[i - 1] == n - na + i - 1) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < na; ++j) pick[j] = pick[j - 1] + 1;
    }
  } else {
    Rng rng(seed);
    r.iterations = iterations;
    std::vector<double> work = pooled;
    for (std::size_t it = 0; it < iterations; ++it) {
      rng.shuffle(std::span<double>(work));
      const double s = std::accumulate(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(na), 0.0);
      if (detail::at_least(stat(s), r.observed)) ++hits;
    }
  }
  r.p_value = static_cast<double>(hits) / static_cast<double>(r.iterations);
  return r;
}

/// Kolmogorov-Smirnov distance between the sample's empirical CDF and U(0, 1).
inline double ks_uniform_distance(std::vector<double> sample) {
  if (sample.empty()) throw ContractError("ks_uniform_distance: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double x = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace gala
