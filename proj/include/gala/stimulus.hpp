#pragma once

// Masked-reveal stimuli: a connected most-to-least important pixel ordering,
// a phase-scrambled background, and a log-spaced ladder of reveal fractions.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/rng.hpp"

namespace gala {

struct FloodFillOptions {
  double beta = 0.05;         // distance penalty per step, in units of the map maximum
  double temperature = 0.1;   // <= 0: greedy
  std::uint64_t seed = 0;
};

/// Seeded at the argmax (first in row-major order on ties). Each step picks one
/// 4-connected frontier pixel with priority importance/max - beta * steps from
/// the seed through the revealed region, by softmax at `temperature` (greedy,
/// lowest index on ties, when temperature <= 0).
inline std::vector<std::size_t> importance_ordering(const Grid<double>& map, const FloodFillOptions& opts = {}) {
  if (map.empty()) throw ContractError("importance_ordering: empty map");
  double peak = 0.0;
  std::size_t seed_px = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (!(map[i] >= 0.0) || !std::isfinite(map[i])) {
      throw ContractError("importance_ordering: map must be finite and nonnegative");
    }
    if (map[i] > peak) {
      peak = map[i];
      seed_px = i;
    }
  }
  if (peak == 0.0) throw ContractError("importance_ordering: all-zero map has no seed pixel");

  const std::size_t H = map.height(), W = map.width(), N = map.size();
  constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> dist(N, kUnset);
  std::vector<char> revealed(N, 0), in_frontier(N, 0);
  std::vector<std::size_t> frontier, order;
  order.reserve(N);
  Rng rng(opts.seed);

  auto for_neighbors = [&](std::size_t p, auto&& fn) {
    const std::size_t r = p / W, c = p % W;
    if (r > 0) fn(p - W);
    if (r + 1 < H) fn(p + W);
    if (c > 0) fn(p - 1);
    if (c + 1 < W) fn(p + 1);
  };
  // A new pixel can shorten paths through the revealed region; relax outward.
  std::vector<std::size_t> queue;
  auto reveal = [&](std::size_t p) {
    revealed[p] = 1;
    order.push_back(p);
    queue.assign(1, p);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t u = queue[head];
      for_neighbors(u, [&](std::size_t q) {
        if (!revealed[q] && !in_frontier[q]) {
          in_frontier[q] = 1;
          frontier.push_back(q);
        }
        if (dist[u] + 1 < dist[q]) {
          dist[q] = dist[u] + 1;
          if (revealed[q]) queue.push_back(q);
        }
      });
    }
  };

  dist[seed_px] = 0;
  reveal(seed_px);
  std::vector<double> prio;
  while (order.size() < N) {
    prio.resize(frontier.size());
    std::size_t best = 0;
    for (std::size_t k = 0; k < frontier.size(); ++k) {
      const std::size_t q = frontier[k];
      prio[k] = map[q] / peak - opts.beta * static_cast<double>(dist[q]);
      if (prio[k] > prio[best] || (prio[k] == prio[best] && q < frontier[best])) best = k;
    }
    std::size_t pick = best;
    if (opts.temperature > 0.0) {
      double total = 0.0;
      for (double& v : prio) {
        v = std::exp((v - prio[best]) / opts.temperature);
        total += v;
      }
      double u = rng.uniform() * total;
      for (std::size_t k = 0; k < prio.size(); ++k) {
        u -= prio[k];
        if (u < 0.0) {
          pick = k;
          break;
        }
      }
    }
    const std::size_t q = frontier[pick];
    frontier[pick] = frontier.back();
    frontier.pop_back();
    in_frontier[q] = 0;
    reveal(q);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Phase scrambling.

struct ScrambleResult {
  Image image;  // clipped to [0, 1]
  Image raw;    // before clipping; same amplitude spectrum as the input
};

namespace detail {

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n) : data(fftw_alloc_complex(n)) {
    if (!data) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(data); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* data;
};

/// In-place 2-D DFT of an H x W complex array (unnormalized).
inline void dft2(fftw_complex* data, std::size_t H, std::size_t W, int sign) {
  fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), data, data, sign, FFTW_ESTIMATE);
  if (!plan) throw NumericError("fftw: plan creation failed");
  fftw_execute(plan);
  fftw_destroy_plan(plan);
}

}  // namespace detail

/// Amplitude spectrum of one H x W grid (unnormalized DFT magnitudes).
inline Grid<double> amplitude_spectrum(const Grid<double>& g) {
  const std::size_t H = g.height(), W = g.width(), N = g.size();
  detail::FftwBuffer buf(N);
  for (std::size_t i = 0; i < N; ++i) {
    buf.data[i][0] = g[i];
    buf.data[i][1] = 0.0;
  }
  detail::dft2(buf.data, H, W, FFTW_FORWARD);
  Grid<double> out(H, W);
  for (std::size_t i = 0; i < N; ++i) out[i] = std::hypot(buf.data[i][0], buf.data[i][1]);
  return out;
}

/// Keeps each channel's amplitude spectrum and substitutes the phase spectrum
/// of seeded white noise (Hermitian, so the result is real), shared across
/// channels, with the DC phase set to 0.
inline ScrambleResult phase_scramble(const Image& image, std::uint64_t seed) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("phase_scramble: need 1 or 3 channels");
  if (image.height == 0 || image.width == 0) throw ContractError("phase_scramble: empty image");
  if (!image.all_finite()) throw ContractError("phase_scramble: non-finite pixels");
  const std::size_t H = image.height, W = image.width, N = H * W;

  Rng rng(seed);
  detail::FftwBuffer noise(N);
  for (std::size_t i = 0; i < N; ++i) {
    noise.data[i][0] = rng.uniform();
    noise.data[i][1] = 0.0;
  }
  detail::dft2(noise.data, H, W, FFTW_FORWARD);
  std::vector<std::complex<double>> rotor(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double a = std::hypot(noise.data[i][0], noise.data[i][1]);
    rotor[i] = a > 0.0 ? std::complex<double>(noise.data[i][0] / a, noise.data[i][1] / a) : 1.0;
  }
  rotor[0] = 1.0;
  // Self-conjugate bins must stay real for an exactly real inverse.
  for (std::size_t r : {std::size_t{0}, H / 2})
    for (std::size_t c : {std::size_t{0}, W / 2})
      if ((2 * r) % H == 0 && (2 * c) % W == 0) rotor[r * W + c] = rotor[r * W + c].real() < 0.0 ? -1.0 : 1.0;
  rotor[0] = 1.0;

  ScrambleResult out{Image(H, W, image.channels), Image(H, W, image.channels)};
  detail::FftwBuffer buf(N);
  for (std::size_t ch = 0; ch < image.channels; ++ch) {
    for (std::size_t i = 0; i < N; ++i) {
      buf.data[i][0] = image.data[i * image.channels + ch];
      buf.data[i][1] = 0.0;
    }
    detail::dft2(buf.data, H, W, FFTW_FORWARD);
    for (std::size_t i = 0; i < N; ++i) {
      const double amp = std::hypot(buf.data[i][0], buf.data[i][1]);
      const auto z = amp * rotor[i];
      buf.data[i][0] = z.real();
      buf.data[i][1] = z.imag();
    }
    detail::dft2(buf.data, H, W, FFTW_BACKWARD);
    for (std::size_t i = 0; i < N; ++i) {
      const double v = buf.data[i][0] / static_cast<double>(N);
      out.raw.data[i * image.channels + ch] = v;
      out.image.data[i * image.channels + ch] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reveal ladder and composition.

/// 100^(k/(n-1)) for k = 0..n-1, rounded to one decimal.
inline std::vector<double> reveal_ladder(std::size_t n_steps) {
  if (n_steps < 2) throw ContractError("reveal_ladder: need at least two steps");
  std::vector<double> out(n_steps);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double v = std::pow(100.0, static_cast<double>(k) / static_cast<double>(n_steps - 1));
    out[k] = std::round(v * 10.0) / 10.0;
    if (k > 0 && out[k] <= out[k - 1]) {
      throw ContractError("reveal_ladder: " + std::to_string(n_steps) + " steps collide after rounding to 0.1");
    }
  }
  return out;
}

struct RevealStimulus {
  std::string image_id;
  std::vector<std::size_t> pixel_order;
  std::vector<double> fractions;
  Image scrambled_background;
};

/// ceil(fraction * pixels / 100), guarded against representation error.
inline std::size_t reveal_count(double fraction, std::size_t pixels) {
  const double exact = fraction * static_cast<double>(pixels) / 100.0;
  return std::min(pixels, static_cast<std::size_t>(std::ceil(exact - 1e-9)));
}

struct StimulusOptions {
  std::size_t ladder_steps = 5;
  FloodFillOptions flood;
  std::uint64_t scramble_seed = 0;
};

inline RevealStimulus make_stimulus(const std::string& image_id, const Image& image, const Grid<double>& map,
                                    const StimulusOptions& opts = {}) {
  if (map.height() != image.height || map.width() != image.width) {
    throw ContractError("make_stimulus: map size differs from the image");
  }
  return {image_id, importance_ordering(map, opts.flood), reveal_ladder(opts.ladder_steps),
          phase_scramble(image, opts.scramble_seed).image};
}

/// Revealed pixels at `fraction`, shifted by the integer offset that moves their
/// centroid to the image center; everything else shows the background.
inline Image compose_reveal(const Image& image, const RevealStimulus& stim, double fraction) {
  if (std::find(stim.fractions.begin(), stim.fractions.end(), fraction) == stim.fractions.end()) {
    throw ContractError("compose_reveal: fraction " + std::to_string(fraction) + " is not on the ladder");
  }
  const std::size_t H = image.height, W = image.width, N = H * W;
  if (stim.pixel_order.size() != N || stim.scrambled_background.height != H ||
      stim.scrambled_background.width != W || stim.scrambled_background.channels != image.channels) {
    throw ContractError("compose_reveal: stimulus does not match the image");
  }
  const std::size_t count = reveal_count(fraction, N);
  double sr = 0.0, sc = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    sr += static_cast<double>(stim.pixel_order[k] / W);
    sc += static_cast<double>(stim.pixel_order[k] % W);
  }
  const double n = static_cast<double>(std::max<std::size_t>(count, 1));
  const auto dy = static_cast<std::ptrdiff_t>(std::lround((static_cast<double>(H) - 1.0) / 2.0 - sr / n));
  const auto dx = static_cast<std::ptrdiff_t>(std::lround((static_cast<double>(W) - 1.0) / 2.0 - sc / n));
  Image out = stim.scrambled_background;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t p = stim.pixel_order[k];
    const auto r = static_cast<std::ptrdiff_t>(p / W) + dy, c = static_cast<std::ptrdiff_t>(p % W) + dx;
    if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(H) || c >= static_cast<std::ptrdiff_t>(W)) continue;
    for (std::size_t ch = 0; ch < image.channels; ++ch)
      out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch) = image.at(p / W, p % W, ch);
  }
  return out;
}

}  // namespace gala
