#pragma once

// Slow reference implementations for the stimulus generator.

#include <cmath>
#include <complex>
#include <cstdint>
#include <deque>
#include <limits>
#include <vector>

#include "gala/image.hpp"
#include "gala/rng.hpp"

namespace gala::testing {

/// Greedy flood fill recomputed from scratch every step: BFS distances through
/// the revealed set, frontier scan, max priority with lowest index on ties.
inline std::vector<std::size_t> oracle_greedy_fill(const Grid<double>& map, double beta) {
  const std::size_t H = map.height(), W = map.width(), N = map.size();
  double peak = 0.0;
  std::size_t seed = 0;
  for (std::size_t i = 0; i < N; ++i)
    if (map[i] > peak) {
      peak = map[i];
      seed = i;
    }
  auto neighbors = [&](std::size_t p) {
    std::vector<std::size_t> out;
    const std::size_t r = p / W, c = p % W;
    if (r > 0) out.push_back(p - W);
    if (r + 1 < H) out.push_back(p + W);
    if (c > 0) out.push_back(p - 1);
    if (c + 1 < W) out.push_back(p + 1);
    return out;
  };
  constexpr std::size_t kInf = std::numeric_limits<std::size_t>::max();
  std::vector<char> revealed(N, 0);
  std::vector<std::size_t> order{seed};
  revealed[seed] = 1;
  while (order.size() < N) {
    std::vector<std::size_t> dist(N, kInf);
    std::deque<std::size_t> q{seed};
    dist[seed] = 0;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop_front();
      for (std::size_t v : neighbors(u))
        if (revealed[v] && dist[v] == kInf) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
    }
    std::size_t best = kInf;
    double best_prio = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < N; ++p) {
      if (revealed[p]) continue;
      std::size_t d = kInf;
      for (std::size_t v : neighbors(p))
        if (revealed[v]) d = std::min(d, dist[v] + 1);
      if (d == kInf) continue;
      const double prio = map[p] / peak - beta * static_cast<double>(d);
      if (prio > best_prio) {
        best_prio = prio;
        best = p;
      }
    }
    revealed[best] = 1;
    order.push_back(best);
  }
  return order;
}

using ComplexGrid = std::vector<std::complex<double>>;

inline ComplexGrid naive_dft(const ComplexGrid& x, std::size_t H, std::size_t W, double sign) {
  const double two_pi = 2.0 * std::acos(-1.0);
  ComplexGrid out(H * W);
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0.0;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
          const double angle = sign * two_pi *
                               (static_cast<double>(u * r) / static_cast<double>(H) +
                                static_cast<double>(v * c) / static_cast<double>(W));
          acc += x[r * W + c] * std::polar(1.0, angle);
        }
      out[u * W + v] = acc;
    }
  return out;
}

struct ScrambleOracle {
  Image raw;
  double max_imag = 0.0;
};

/// Phase scramble by direct DFT sums: amplitude of each channel, unit phase
/// factors of the DFT of seeded uniform noise drawn in row-major order.
inline ScrambleOracle oracle_phase_scramble(const Image& image, std::uint64_t seed) {
  const std::size_t H = image.height, W = image.width, N = H * W;
  Rng rng(seed);
  ComplexGrid noise(N);
  for (auto& z : noise) z = rng.uniform();
  ComplexGrid phase = naive_dft(noise, H, W, -1.0);
  for (auto& z : phase) z = std::abs(z) > 0.0 ? z / std::abs(z) : 1.0;
  phase[0] = 1.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if ((2 * r) % H == 0 && (2 * c) % W == 0 && (r + c) > 0) phase[r * W + c] = phase[r * W + c].real() < 0 ? -1.0 : 1.0;

  ScrambleOracle out{Image(H, W, image.channels)};
  for (std::size_t ch = 0; ch < image.channels; ++ch) {
    ComplexGrid x(N);
    for (std::size_t i = 0; i < N; ++i) x[i] = image.data[i * image.channels + ch];
    ComplexGrid X = naive_dft(x, H, W, -1.0);
    for (std::size_t i = 0; i < N; ++i) X[i] = std::abs(X[i]) * phase[i];
    const ComplexGrid y = naive_dft(X, H, W, 1.0);
    for (std::size_t i = 0; i < N; ++i) {
      out.raw.data[i * image.channels + ch] = y[i].real() / static_cast<double>(N);
      out.max_imag = std::max(out.max_imag, std::abs(y[i].imag()) / static_cast<double>(N));
    }
  }
  return out;
}

}  // namespace gala::testing
