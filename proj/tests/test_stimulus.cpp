#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gala/stimulus.hpp"
#include "stimulus_oracle.hpp"
#include "test_util.hpp"

using namespace gala;
using gala::testing::oracle_greedy_fill;
using gala::testing::oracle_phase_scramble;

namespace {

Grid<double> random_map(Rng& rng, std::size_t h, std::size_t w) {
  Grid<double> g(h, w);
  for (double& v : g.values()) v = rng.uniform();
  return g;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w, std::size_t ch) {
  Image img(h, w, ch);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

bool is_permutation_of_all(const std::vector<std::size_t>& order, std::size_t n) {
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  return sorted == all;
}

// Every prefix is connected iff each pixel after the first touches an earlier one.
bool prefixes_connected(const std::vector<std::size_t>& order, std::size_t W) {
  std::vector<char> seen(order.size(), 0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t p = order[k];
    if (k > 0) {
      const std::size_t r = p / W, c = p % W;
      const bool touches = (r > 0 && seen[p - W]) || (p + W < seen.size() && seen[p + W]) ||
                           (c > 0 && seen[p - 1]) || (c + 1 < W && seen[p + 1]);
      if (!touches) return false;
    }
    seen[p] = 1;
  }
  return true;
}

}  // namespace

TEST(ImportanceOrdering, SeedsAtTheArgmax) {
  Grid<double> g(3, 3, 0.0);
  g(1, 1) = 2.0;
  EXPECT_EQ(importance_ordering(g).front(), 4u);
  Grid<double> tie(2, 3, 0.0);
  tie(0, 2) = 1.0;
  tie(1, 0) = 1.0;
  EXPECT_EQ(importance_ordering(tie).front(), 2u);
}

TEST(ImportanceOrdering, GreedyFollowsARamp) {
  const Grid<double> g(1, 4, {4, 3, 2, 1});
  FloodFillOptions o;
  o.temperature = 0.0;
  o.beta = 0.0;
  EXPECT_EQ(importance_ordering(g, o), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(ImportanceOrdering, GreedyMatchesRecomputingOracle) {
  Rng rng(11);
  FloodFillOptions o;
  o.temperature = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 2 + rng.index(6), w = 2 + rng.index(6);
    const auto map = random_map(rng, h, w);
    o.beta = trial % 3 == 0 ? 0.0 : rng.uniform(0.0, 0.3);
    EXPECT_EQ(importance_ordering(map, o), oracle_greedy_fill(map, o.beta)) << h << "x" << w << " beta " << o.beta;
  }
}

TEST(ImportanceOrdering, StochasticFillIsAConnectedPermutation) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 1 + rng.index(12), w = 1 + rng.index(12);
    auto map = random_map(rng, h, w);
    map[rng.index(map.size())] += 0.5;
    FloodFillOptions o;
    o.seed = trial;
    o.temperature = rng.uniform(0.01, 1.0);
    const auto order = importance_ordering(map, o);
    ASSERT_EQ(order.size(), h * w);
    EXPECT_TRUE(is_permutation_of_all(order, h * w));
    EXPECT_TRUE(prefixes_connected(order, w));
    EXPECT_EQ(order, importance_ordering(map, o));
  }
}

TEST(ImportanceOrdering, SeedChangesStochasticOrder) {
  Rng rng(13);
  const auto map = random_map(rng, 10, 10);
  FloodFillOptions a, b;
  a.temperature = b.temperature = 0.5;
  a.seed = 1;
  b.seed = 2;
  EXPECT_NE(importance_ordering(map, a), importance_ordering(map, b));
  EXPECT_EQ(importance_ordering(map, a).front(), importance_ordering(map, b).front());
}

TEST(ImportanceOrdering, Errors) {
  EXPECT_THROW(importance_ordering(Grid<double>(3, 3, 0.0)), ContractError);
  EXPECT_THROW(importance_ordering(Grid<double>()), ContractError);
  Grid<double> neg(2, 2, 1.0);
  neg(0, 1) = -0.5;
  EXPECT_THROW(importance_ordering(neg), ContractError);
}

TEST(PhaseScramble, ZeroImageStaysZero) {
  const Image zero(8, 6, 3, 0.0);
  const auto out = phase_scramble(zero, 3);
  for (double v : out.image.data) EXPECT_EQ(v, 0.0);
  for (double v : out.raw.data) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(PhaseScramble, PreservesAmplitudeSpectrum) {
  Rng rng(14);
  for (auto [h, w, ch] : {std::tuple{8, 8, 3}, std::tuple{7, 10, 1}, std::tuple{16, 5, 3}}) {
    const Image img = random_image(rng, h, w, ch);
    const auto out = phase_scramble(img, 21);
    for (std::size_t c = 0; c < img.channels; ++c) {
      const auto a = amplitude_spectrum(img.channel(c)), b = amplitude_spectrum(out.raw.channel(c));
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    }
    // The DC term carries the mean, and its phase is fixed.
    for (std::size_t c = 0; c < img.channels; ++c) {
      const auto in = img.channel(c), raw = out.raw.channel(c);
      const double m_in = std::accumulate(in.values().begin(), in.values().end(), 0.0);
      const double m_out = std::accumulate(raw.values().begin(), raw.values().end(), 0.0);
      EXPECT_NEAR(m_in, m_out, 1e-9);
    }
  }
}

TEST(PhaseScramble, MatchesDirectDftOracle) {
  Rng rng(15);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{5, 6}, std::pair{6, 7}}) {
    const Image img = random_image(rng, h, w, 3);
    const auto out = phase_scramble(img, 42);
    const auto ref = oracle_phase_scramble(img, 42);
    EXPECT_LT(ref.max_imag, 1e-12);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      EXPECT_NEAR(out.raw.data[i], ref.raw.data[i], 1e-9);
      EXPECT_EQ(out.image.data[i], std::clamp(out.raw.data[i], 0.0, 1.0));
    }
  }
}

TEST(PhaseScramble, DeterministicAndSeedSensitive) {
  Rng rng(16);
  const Image img = random_image(rng, 8, 8, 1);
  EXPECT_EQ(phase_scramble(img, 1).raw.data, phase_scramble(img, 1).raw.data);
  EXPECT_NE(phase_scramble(img, 1).raw.data, phase_scramble(img, 2).raw.data);
}

TEST(PhaseScramble, Errors) {
  EXPECT_THROW(phase_scramble(Image(4, 4, 2, 0.0), 0), ContractError);
  Image bad(4, 4, 1, 0.0);
  bad.data[3] = std::nan("");
  EXPECT_THROW(phase_scramble(bad, 0), ContractError);
}

TEST(RevealLadder, Examples) {
  EXPECT_EQ(reveal_ladder(2), (std::vector<double>{1.0, 100.0}));
  EXPECT_EQ(reveal_ladder(3), (std::vector<double>{1.0, 10.0, 100.0}));
  const auto five = reveal_ladder(5);
  ASSERT_EQ(five.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    const double closed = std::pow(10.0, static_cast<double>(k) / 2.0);
    EXPECT_NEAR(five[k], closed, 0.05 + 1e-12);
    EXPECT_NEAR(five[k] * 10.0, std::round(five[k] * 10.0), 1e-9);
  }
  EXPECT_EQ(five[1], 3.2);
  EXPECT_EQ(five[3], 31.6);
  EXPECT_THROW(reveal_ladder(1), ContractError);
  EXPECT_THROW(reveal_ladder(300), ContractError);
}

TEST(RevealLadder, StrictlyIncreasingWithinRange) {
  for (std::size_t n = 2; n <= 30; ++n) {
    const auto f = reveal_ladder(n);
    EXPECT_EQ(f.front(), 1.0);
    EXPECT_EQ(f.back(), 100.0);
    for (std::size_t k = 1; k < n; ++k) EXPECT_LT(f[k - 1], f[k]);
  }
}

TEST(ComposeReveal, FullRevealIsTheOriginal) {
  Rng rng(17);
  const Image img = random_image(rng, 9, 12, 3);
  StimulusOptions o;
  o.flood.seed = 3;
  const auto stim = make_stimulus("x", img, random_map(rng, 9, 12), o);
  EXPECT_EQ(compose_reveal(img, stim, 100.0).data, img.data);
}

TEST(ComposeReveal, OnePercentOfHundredPixelsShowsTheSeed) {
  Rng rng(18);
  Image img(10, 10, 1);
  for (double& v : img.data) v = -1.0 - rng.uniform();
  Grid<double> map(10, 10, 0.1);
  map(2, 7) = 1.0;
  const auto stim = make_stimulus("x", img, map);
  const Image out = compose_reveal(img, stim, 1.0);
  std::size_t shown = 0;
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 10; ++c) {
      if (out.at(r, c, 0) < 0.0) {
        ++shown;
        // lround(4.5 - 2) = 3 rows down, lround(4.5 - 7) = -3 columns.
        EXPECT_EQ(r, 5u);
        EXPECT_EQ(c, 4u);
        EXPECT_EQ(out.at(r, c, 0), img.at(2, 7, 0));
      } else {
        EXPECT_EQ(out.at(r, c, 0), stim.scrambled_background.at(r, c, 0));
      }
    }
  EXPECT_EQ(shown, 1u);
}

TEST(ComposeReveal, RevealedCountsFollowTheLadder) {
  // A central blob keeps every translated pixel on the canvas.
  const std::size_t H = 23, W = 17;
  Image img(H, W, 3);
  Rng rng(19);
  for (double& v : img.data) v = -1.0 - rng.uniform();
  Grid<double> blob(H, W), other(H, W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double dr = static_cast<double>(r) - 11.0, dc = static_cast<double>(c) - 8.0;
      blob(r, c) = std::exp(-(dr * dr + dc * dc) / 40.0);
      other(r, c) = 1.0 / (1.0 + std::abs(dr) + 2.0 * std::abs(dc));
    }
  StimulusOptions o;
  o.ladder_steps = 7;
  o.flood.temperature = 0.0;
  const auto a = make_stimulus("x", img, blob, o);
  const auto b = make_stimulus("x", img, other, o);
  std::size_t prev = 0;
  for (double f : a.fractions) {
    const auto expected = static_cast<std::size_t>(std::ceil(f * static_cast<double>(H * W) / 100.0 - 1e-9));
    EXPECT_EQ(reveal_count(f, H * W), expected);
    EXPECT_GE(expected, prev);
    prev = expected;
    for (const auto* stim : {&a, &b}) {
      const Image out = compose_reveal(img, *stim, f);
      std::size_t shown = 0;
      for (std::size_t i = 0; i < out.data.size(); i += 3) shown += out.data[i] < 0.0;
      EXPECT_EQ(shown, expected) << "fraction " << f;
    }
  }
  EXPECT_EQ(reveal_count(1.0, 256 * 256), 656u);
  EXPECT_EQ(reveal_count(100.0, 256 * 256), 65536u);
  EXPECT_EQ(reveal_count(10.0, 100), 10u);
}

TEST(ComposeReveal, Errors) {
  Rng rng(20);
  const Image img = random_image(rng, 6, 6, 1);
  const auto stim = make_stimulus("x", img, random_map(rng, 6, 6));
  EXPECT_THROW(compose_reveal(img, stim, 50.0), ContractError);
  EXPECT_THROW(compose_reveal(random_image(rng, 6, 7, 1), stim, 100.0), ContractError);
  EXPECT_THROW(make_stimulus("x", img, random_map(rng, 5, 6)), ContractError);
}
