#pragma once

// Bubble rasterization, map aggregation and reliability statistics for
// ClickMe importance maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/rng.hpp"
#include "json.hpp"

namespace gala {

inline constexpr std::size_t kCanvasSize = 256;
inline constexpr std::size_t kPlayerBubble = 14;
inline constexpr std::size_t kPartnerBubble = 21;

// Dataset-level reference values reported for the human crowd data; they are
// not recomputed by this toolkit.
inline constexpr double kReportedHumanReliability = 0.58;
inline constexpr double kReportedNullReliability = 0.18;

struct BubbleEvent {
  std::string round_id;
  std::int64_t t_ms = 0;
  std::int64_t x = 0;  // column
  std::int64_t y = 0;  // row
  std::size_t size = kPlayerBubble;

  nlohmann::json to_json() const {
    return {{"round_id", round_id}, {"t_ms", t_ms}, {"x", x}, {"y", y}, {"size", size}};
  }
  static BubbleEvent from_json(const nlohmann::json& j) {
    BubbleEvent e;
    try {
      e.round_id = j.value("round_id", std::string{});
      e.t_ms = j.at("t_ms").get<std::int64_t>();
      e.x = j.at("x").get<std::int64_t>();
      e.y = j.at("y").get<std::int64_t>();
      e.size = j.value("size", kPlayerBubble);
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(std::string("bubble event: ") + ex.what());
    }
    return e;
  }
  friend bool operator==(const BubbleEvent&, const BubbleEvent&) = default;
};

struct ImportanceMap {
  std::string image_id;
  Grid<double> grid;
  std::size_t participant_count = 1;
};

/// Square of side `size` centered on (y, x): rows y - size/2 .. y - size/2 + size - 1.
template <typename Fn>
void for_each_bubble_pixel(std::int64_t y, std::int64_t x, std::size_t size, std::size_t height, std::size_t width,
                           Fn&& fn) {
  const auto s = static_cast<std::int64_t>(size);
  const std::int64_t r0 = std::max<std::int64_t>(0, y - s / 2);
  const std::int64_t c0 = std::max<std::int64_t>(0, x - s / 2);
  const std::int64_t r1 = std::min<std::int64_t>(static_cast<std::int64_t>(height), y - s / 2 + s);
  const std::int64_t c1 = std::min<std::int64_t>(static_cast<std::int64_t>(width), x - s / 2 + s);
  for (std::int64_t r = r0; r < r1; ++r)
    for (std::int64_t c = c0; c < c1; ++c) fn(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
}

inline void check_on_canvas(const BubbleEvent& e, std::size_t height, std::size_t width) {
  if (e.x < 0 || e.y < 0 || e.x >= static_cast<std::int64_t>(width) || e.y >= static_cast<std::int64_t>(height)) {
    throw ContractError("bubble at (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") lies outside the " +
                        std::to_string(width) + "x" + std::to_string(height) + " canvas");
  }
}

/// Per-pixel stamp counts; one player's selection for one round.
inline Grid<double> rasterize_bubbles(std::span<const BubbleEvent> events, std::size_t height = kCanvasSize,
                                      std::size_t width = kCanvasSize) {
  Grid<double> map(height, width, 0.0);
  for (const auto& e : events) {
    check_on_canvas(e, height, width);
    for_each_bubble_pixel(e.y, e.x, e.size, height, width, [&](std::size_t r, std::size_t c) { map(r, c) += 1.0; });
  }
  return map;
}

/// Per-pixel proportion of players that covered the pixel (maps binarized first).
inline ImportanceMap aggregate_maps(std::span<const ImportanceMap> maps) {
  if (maps.empty()) throw ContractError("aggregate_maps: no maps");
  ImportanceMap out;
  out.image_id = maps.front().image_id;
  out.grid = Grid<double>(maps.front().grid.height(), maps.front().grid.width(), 0.0);
  for (const auto& m : maps) {
    if (!m.grid.same_shape(out.grid)) throw ContractError("aggregate_maps: map shapes differ");
    if (m.image_id != out.image_id) throw ContractError("aggregate_maps: maps belong to different images");
    for (std::size_t i = 0; i < m.grid.size(); ++i) out.grid[i] += m.grid[i] > 0.0 ? 1.0 : 0.0;
  }
  for (double& v : out.grid.values()) v /= static_cast<double>(maps.size());
  out.participant_count = maps.size();
  return out;
}

// ---------------------------------------------------------------------------
// Rank correlation.

/// 1-based fractional ranks; ties share their average rank.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  if (a.size() < 2) throw ContractError("pearson: need at least two elements");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw ContractError("correlation undefined: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: length mismatch");
  if (a.size() < 2) throw ContractError("spearman: need at least two elements");
  const auto ra = fractional_ranks(a);
  const auto rb = fractional_ranks(b);
  return pearson(ra, rb);
}

inline double spearman(const Grid<double>& a, const Grid<double>& b) {
  if (!a.same_shape(b)) throw ContractError("spearman: map shapes differ");
  return spearman(std::span<const double>(a.values()), std::span<const double>(b.values()));
}

// ---------------------------------------------------------------------------
// Reliability.

struct RatedImage {
  std::string image_id;
  std::vector<Grid<double>> player_maps;
};

struct ReliabilityReport {
  double rho_observed = 0.0;
  double rho_null = 0.0;
  std::size_t pair_count = 0;
  std::size_t skipped_pairs = 0;  // pairs with a constant map (correlation undefined)
  std::uint64_t seed = 0;
};

/// Observed: two distinct players on one image. Null: one player each on two
/// distinct images. Maps are blurred (kernel 1 = no blur) before ranking.
inline ReliabilityReport inter_rater_reliability(std::span<const RatedImage> dataset, std::size_t n_pairs,
                                                 std::size_t blur_kernel, std::uint64_t seed) {
  if (n_pairs == 0) throw ContractError("inter_rater_reliability: n_pairs must be positive");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (dataset[i].player_maps.size() >= 2) eligible.push_back(i);
  if (eligible.empty()) throw ContractError("inter_rater_reliability: insufficient players (no image has two)");
  if (dataset.size() < 2) throw ContractError("inter_rater_reliability: null pairs need at least two images");

  std::map<std::pair<std::size_t, std::size_t>, Grid<double>> blurred;
  auto map_at = [&](std::size_t img, std::size_t player) -> const Grid<double>& {
    auto key = std::pair{img, player};
    auto it = blurred.find(key);
    if (it == blurred.end()) it = blurred.emplace(key, gaussian_blur(dataset[img].player_maps[player], blur_kernel)).first;
    return it->second;
  };

  Rng rng(seed);
  ReliabilityReport rep;
  rep.seed = seed;
  const std::size_t max_attempts = n_pairs * 20;
  auto run = [&](auto&& draw) {
    double total = 0.0;
    std::size_t done = 0, attempts = 0;
    while (done < n_pairs) {
      if (++attempts > max_attempts) throw NumericError("inter_rater_reliability: too many constant maps");
      const auto [a, b] = draw();
      try {
        total += spearman(a, b);
        ++done;
      } catch (const ContractError&) {
        ++rep.skipped_pairs;
      }
    }
    return total / static_cast<double>(n_pairs);
  };

  rep.rho_observed = run([&]() -> std::pair<const Grid<double>&, const Grid<double>&> {
    const std::size_t img = eligible[rng.index(eligible.size())];
    const std::size_t players = dataset[img].player_maps.size();
    const std::size_t p1 = rng.index(players);
    std::size_t p2 = rng.index(players - 1);
    if (p2 >= p1) ++p2;
    return {map_at(img, p1), map_at(img, p2)};
  });
  rep.rho_null = run([&]() -> std::pair<const Grid<double>&, const Grid<double>&> {
    for (;;) {
      const std::size_t i1 = rng.index(dataset.size());
      std::size_t i2 = rng.index(dataset.size() - 1);
      if (i2 >= i1) ++i2;
      if (dataset[i1].player_maps.empty() || dataset[i2].player_maps.empty()) continue;
      const std::size_t p1 = rng.index(dataset[i1].player_maps.size());
      const std::size_t p2 = rng.index(dataset[i2].player_maps.size());
      return {map_at(i1, p1), map_at(i2, p2)};
    }
  });
  rep.pair_count = n_pairs;
  return rep;
}

struct ExplainedVariability {
  double percentage = 0.0;                      // 100 * mean rho / rho_human
  std::vector<std::string> image_ids;           // images with a defined correlation
  std::vector<double> per_image_rho;
  std::vector<std::string> undefined;           // images where either map was constant
  std::optional<double> fraction_above_null;    // share of per-image rho > rho_null
};

/// Model-vs-human rank correlation relative to human inter-rater reliability.
inline ExplainedVariability explained_variability(const std::map<std::string, Grid<double>>& model_maps,
                                                  const std::map<std::string, Grid<double>>& human_maps,
                                                  double rho_human, std::optional<double> rho_null = std::nullopt) {
  if (!(rho_human > 0.0)) throw ContractError("explained_variability: rho_human must be positive");
  ExplainedVariability out;
  std::size_t overlap = 0;
  for (const auto& [id, model] : model_maps) {
    auto it = human_maps.find(id);
    if (it == human_maps.end()) continue;
    ++overlap;
    try {
      out.per_image_rho.push_back(spearman(model, it->second));
      out.image_ids.push_back(id);
    } catch (const ContractError&) {
      out.undefined.push_back(id);
    }
  }
  if (overlap == 0) throw ContractError("explained_variability: no overlapping images");
  if (out.per_image_rho.empty()) {
    throw ContractError("explained_variability: correlation undefined for every image (constant maps)");
  }
  const double mean = std::accumulate(out.per_image_rho.begin(), out.per_image_rho.end(), 0.0) /
                      static_cast<double>(out.per_image_rho.size());
  out.percentage = 100.0 * mean / rho_human;
  if (rho_null) {
    const auto above = std::count_if(out.per_image_rho.begin(), out.per_image_rho.end(),
                                     [&](double r) { return r > *rho_null; });
    out.fraction_above_null = static_cast<double>(above) / static_cast<double>(out.per_image_rho.size());
  }
  return out;
}

}  // namespace gala
