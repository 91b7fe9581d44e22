#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gala/supervision.hpp"
#include "gala/train.hpp"
#include "test_util.hpp"

using namespace gala;
using gala::testing::random_tensor;

namespace {

TrainConfig no_blur() {
  TrainConfig c;
  c.map_blur_kernel = 1;
  return c;
}

double keys(double x) {
  x = std::abs(x);
  if (x < 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
  if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
  return 0.0;
}

// Direct 2-D bicubic interpolation: half-pixel centers, border replication.
double bicubic_at(const Grid<double>& in, double sr, double sc) {
  double acc = 0.0;
  const long r0 = static_cast<long>(std::floor(sr)), c0 = static_cast<long>(std::floor(sc));
  for (long m = r0 - 1; m <= r0 + 2; ++m)
    for (long n = c0 - 1; n <= c0 + 2; ++n) {
      const long rr = std::clamp(m, 0L, static_cast<long>(in.height()) - 1);
      const long cc = std::clamp(n, 0L, static_cast<long>(in.width()) - 1);
      acc += keys(sr - static_cast<double>(m)) * keys(sc - static_cast<double>(n)) * in(rr, cc);
    }
  return acc;
}

double brute_distance(const std::vector<double>& a, const std::vector<double>& r) {
  double na = 0.0, nr = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nr += r[i] * r[i];
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = r[i] / std::sqrt(nr) - a[i] / std::sqrt(na);
    d += x * x;
  }
  return std::sqrt(d);
}

}  // namespace

TEST(TrainConfig, ValidationNamesTheField) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.decay_epochs = {30, 20};
  try {
    c.validate();
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("decay_epochs"), std::string::npos);
  }
  c = TrainConfig{};
  c.decay_epochs = {100};
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.map_blur_kernel = 48;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.lambda = 6.0;
  c.resize_mode = ResizeMode::bilinear;
  c.supervision = SupervisionMode::bbox;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  auto j = c.to_json();
  j["lamda"] = 1.0;
  EXPECT_THROW(TrainConfig::from_json(j), ContractError);
  j = c.to_json();
  j["supervision"] = "boxes";
  EXPECT_THROW(TrainConfig::from_json(j), ContractError);
}

TEST(TrainConfig, StepSchedule) {
  TrainConfig c;
  c.base_lr = 0.1;
  c.epochs = 6;
  c.decay_epochs = {2, 4};
  const std::vector<double> expected{0.1, 0.1, 0.01, 0.01, 0.001, 0.001};
  for (std::size_t e = 0; e < 6; ++e) EXPECT_NEAR(c.learning_rate(e), expected[e], 1e-15);
}

TEST(PrepareTarget, EmptyMapIsFlagged) {
  const auto t = prepare_target_map(Grid<double>(16, 16, 0.0), 4, 4, TrainConfig{});
  EXPECT_TRUE(t.empty);
  EXPECT_EQ(t.values.height(), 4u);
  for (double v : t.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(PrepareTarget, DeltaMapGivesCenteredUnitBlob) {
  Grid<double> m(32, 32, 0.0);
  m(20, 9) = 1.0;
  TrainConfig c;
  c.map_blur_kernel = 9;
  const auto t = prepare_target_map(m, 32, 32, c);
  ASSERT_FALSE(t.empty);
  EXPECT_NEAR(l2_norm(t.values), 1.0, 1e-12);
  double best = -1.0, mr = 0.0, mc = 0.0, mass = 0.0;
  std::size_t br = 0, bc = 0;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t col = 0; col < 32; ++col) {
      const double v = t.values(r, col);
      if (v > best) {
        best = v;
        br = r;
        bc = col;
      }
      mr += v * static_cast<double>(r);
      mc += v * static_cast<double>(col);
      mass += v;
    }
  EXPECT_EQ(br, 20u);
  EXPECT_EQ(bc, 9u);
  EXPECT_NEAR(mr / mass, 20.0, 1e-9);
  EXPECT_NEAR(mc / mass, 9.0, 1e-9);
}

TEST(PrepareTarget, RampMatchesDirectBicubic) {
  Grid<double> ramp(8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) ramp(r, c) = static_cast<double>(c) + 0.5 * static_cast<double>(r);
  const auto t = prepare_target_map(ramp, 4, 4, no_blur());
  Grid<double> ref(4, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      ref(r, c) = bicubic_at(ramp, (static_cast<double>(r) + 0.5) * 2.0 - 0.5, (static_cast<double>(c) + 0.5) * 2.0 - 0.5);
  const double norm = l2_norm(ref);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(t.values[i], ref[i] / norm, 1e-6);
  // One row of the column ramp by hand: Keys weights (-1/16, 9/16, 9/16, -1/16).
  Grid<double> cols(1, 8);
  for (std::size_t c = 0; c < 8; ++c) cols(0, c) = static_cast<double>(c);
  const Grid<double> r = resize(cols, 1, 4);
  EXPECT_NEAR(r[0], 0.4375, 1e-12);
  EXPECT_NEAR(r[1], 2.5, 1e-12);
  EXPECT_NEAR(r[2], 4.5, 1e-12);
  EXPECT_NEAR(r[3], 6.5625, 1e-12);
}

TEST(PrepareTarget, RejectsNegativeValues) {
  Grid<double> m(4, 4, 0.1);
  m(1, 1) = -0.5;
  EXPECT_THROW(prepare_target_map(m, 2, 2, TrainConfig{}), ContractError);
}

TEST(BboxMap, SinglePixelCornersAndScatter) {
  Grid<double> m(6, 7, 0.0);
  m(2, 3) = 0.4;
  auto b = derive_bbox_map(m, 0.0);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(b(r, c), (r == 2 && c == 3) ? 1.0 : 0.0);

  Grid<double> corners(6, 7, 0.0);
  corners(0, 0) = 1.0;
  corners(5, 6) = 2.0;
  b = derive_bbox_map(corners, 0.0);
  for (double v : b.values()) EXPECT_EQ(v, 1.0);

  EXPECT_EQ(derive_bbox_map(Grid<double>(3, 3, 0.0), 0.0), Grid<double>(3, 3, 0.0));

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Grid<double> s(9, 11, 0.0);
    std::size_t r0 = 99, r1 = 0, c0 = 99, c1 = 0;
    for (int k = 0; k < 5; ++k) {
      const std::size_t r = rng.index(9), c = rng.index(11);
      s(r, c) = rng.uniform(0.5, 1.0);
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
    const auto box = derive_bbox_map(s, 0.25);
    for (std::size_t r = 0; r < 9; ++r)
      for (std::size_t c = 0; c < 11; ++c)
        EXPECT_EQ(box(r, c), (r >= r0 && r <= r1 && c >= c0 && c <= c1) ? 1.0 : 0.0);
  }
  EXPECT_THROW(derive_bbox_map(Grid<double>(2, 2, 0.0), -1.0), ContractError);
}

TEST(MapLoss, ScaleInvariantInTarget) {
  Rng rng(2);
  const Tensor a = random_tensor(rng, {3, 4, 4, 8});
  const Tensor r = random_tensor(rng, {3, 4, 4, 1}, 0.0, 1.0);
  const double base = map_loss({{0, a}}, {{0, r}});
  for (double c : {0.5, 3.0, 1e4}) {
    std::vector<double> scaled = r.to_vector();
    for (double& v : scaled) v *= c;
    EXPECT_NEAR(map_loss({{0, a}}, {{0, Tensor(r.shape(), scaled)}}), base, 1e-12) << "c = " << c;
  }
}

TEST(MapLoss, ProportionalTargetIsZero) {
  Rng rng(3);
  const Tensor a = random_tensor(rng, {2, 3, 3, 4});
  std::vector<double> col(18);
  for (std::size_t s = 0; s < 18; ++s) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 4; ++c) acc += a[s * 4 + c] * a[s * 4 + c];
    col[s] = 2.5 * std::sqrt(acc);
  }
  EXPECT_NEAR(map_loss({{0, a}}, {{0, Tensor(Shape{2, 3, 3, 1}, col)}}), 0.0, 1e-12);
}

TEST(MapLoss, AntipodalUnitMapsAreTwoApart) {
  Graph g;
  const Tensor r(Shape{1, 2, 2, 1}, {0.5, 0.5, 0.5, 0.5});
  const auto neg = g.constant(Tensor(Shape{1, 2, 2, 1}, {-0.5, -0.5, -0.5, -0.5}));
  const auto d = detail::layer_distance(g, neg, LayerTarget{r, {1.0}}, 1e-12);
  EXPECT_NEAR(g.value(d).item(), 2.0, 1e-15);
}

TEST(MapLoss, MatchesBruteForce) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor(rng, {1, 3, 3, 1}, 0.0, 1.0);
    const Tensor r = random_tensor(rng, {1, 3, 3, 1}, 0.0, 1.0);
    EXPECT_NEAR(map_loss({{5, a}}, {{5, r}}), brute_distance(a.to_vector(), r.to_vector()), 1e-10);
  }
}

TEST(MapLoss, SumsLayersAndAveragesSamples) {
  Rng rng(5);
  const Tensor a1 = random_tensor(rng, {2, 3, 3, 1}, 0.0, 1.0), a2 = random_tensor(rng, {2, 3, 3, 1}, 0.0, 1.0);
  const Tensor r1 = random_tensor(rng, {2, 3, 3, 1}, 0.0, 1.0), r2 = random_tensor(rng, {2, 3, 3, 1}, 0.0, 1.0);
  auto slice = [](const Tensor& t, std::size_t n) {
    return std::vector<double>(t.values().begin() + n * 9, t.values().begin() + (n + 1) * 9);
  };
  double expected = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    expected += 0.5 * brute_distance(slice(a1, n), slice(r1, n));
    expected += 0.5 * brute_distance(slice(a2, n), slice(r2, n));
  }
  EXPECT_NEAR(map_loss({{1, a1}, {2, a2}}, {{1, r1}, {2, r2}}), expected, 1e-12);
}

TEST(MapLoss, EmptyTargetsAreExcluded) {
  Rng rng(6);
  const Tensor a = random_tensor(rng, {2, 3, 3, 1}, 0.0, 1.0);
  std::vector<double> r(18, 0.0);
  for (std::size_t i = 0; i < 9; ++i) r[i] = rng.uniform(0.1, 1.0);
  const double expected =
      brute_distance(std::vector<double>(a.values().begin(), a.values().begin() + 9), std::vector<double>(r.begin(), r.begin() + 9));
  EXPECT_NEAR(map_loss({{0, a}}, {{0, Tensor(Shape{2, 3, 3, 1}, r)}}), expected, 1e-12);
}

TEST(MapLoss, MissingLayerIsAnError) {
  const Tensor a = Tensor::full({1, 2, 2, 1}, 1.0);
  EXPECT_THROW(map_loss({{0, a}, {1, a}}, {{0, a}}), ContractError);
}

TEST(MapLoss, DecreasesAlongInterpolationToTarget) {
  Rng rng(7);
  const Tensor a0 = random_tensor(rng, {1, 4, 4, 1}, 0.0, 1.0);
  const Tensor r = random_tensor(rng, {1, 4, 4, 1}, 0.0, 1.0);
  double norm = 0.0;
  for (double v : r.values()) norm += v * v;
  norm = std::sqrt(norm);
  double a0n = 0.0;
  for (double v : a0.values()) a0n += v * v;
  a0n = std::sqrt(a0n);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 10; ++k) {
    const double t = k / 10.0;
    std::vector<double> mix(16);
    for (std::size_t i = 0; i < 16; ++i) mix[i] = (1.0 - t) * a0[i] / a0n + t * r[i] / norm;
    const double l = map_loss({{0, Tensor(a0.shape(), mix)}}, {{0, r}});
    EXPECT_LT(l, prev) << "t = " << t;
    prev = l;
  }
  EXPECT_NEAR(prev, 0.0, 1e-12);
}

TEST(FeatureLoss, OrthogonalMapsAreRootTwoApart) {
  const Tensor u(Shape{1, 2, 2, 3}, {1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const Tensor r(Shape{1, 2, 2, 1}, {0, 0, 0, 7});
  EXPECT_NEAR(direct_feature_loss({{0, u}}, {{0, r}}), std::sqrt(2.0), 1e-15);
  const Tensor prop(Shape{1, 2, 2, 1}, {6, 0, 0, 0});
  EXPECT_NEAR(direct_feature_loss({{0, u}}, {{0, prop}}), 0.0, 1e-15);
}

TEST(FeatureLoss, MatchesBruteForce) {
  Rng rng(8);
  const Tensor u = random_tensor(rng, {1, 3, 3, 2});
  const Tensor r = random_tensor(rng, {1, 3, 3, 1}, 0.0, 1.0);
  std::vector<double> col(9);
  for (std::size_t s = 0; s < 9; ++s) col[s] = std::hypot(u[2 * s], u[2 * s + 1]);
  EXPECT_NEAR(direct_feature_loss({{0, u}}, {{0, r}}), brute_distance(col, r.to_vector()), 1e-10);
}

TEST(TotalLoss, LambdaZeroIsCrossEntropy) {
  Rng rng(9);
  const Tensor logits = random_tensor(rng, {3, 5}, -2, 2);
  const std::vector<std::size_t> labels{0, 4, 2};
  Graph g;
  const double ce = g.value(g.softmax_cross_entropy(g.constant(logits), labels)).item();
  const Tensor a = random_tensor(rng, {3, 2, 2, 4});
  const Tensor r = random_tensor(rng, {3, 2, 2, 1}, 0.0, 1.0);
  EXPECT_EQ(total_loss(logits, labels, {{0, a}}, {{0, r}}, 0.0), ce);
}

TEST(TotalLoss, HandComputedWithLambdaSix) {
  const Tensor logits(Shape{1, 3}, {1.0, 2.0, 0.5});
  const double ce = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  const Tensor a(Shape{1, 1, 2, 1}, {3.0, 4.0});
  const Tensor r(Shape{1, 1, 2, 1}, {1.0, 0.0});
  const double ml = std::sqrt((1.0 - 0.6) * (1.0 - 0.6) + 0.8 * 0.8);
  EXPECT_NEAR(total_loss(logits, {1}, {{0, a}}, {{0, r}}, 6.0), ce + 6.0 * ml, 1e-12);
}

TEST(TotalLoss, VanishesForPerfectPrediction) {
  const Tensor logits(Shape{1, 2}, {60.0, -60.0});
  const Tensor a(Shape{1, 1, 2, 1}, {0.3, 0.4});
  const Tensor r(Shape{1, 1, 2, 1}, {3.0, 4.0});
  EXPECT_LT(total_loss(logits, {0}, {{0, a}}, {{0, r}}, 6.0), 1e-12);
}

TEST(TotalLoss, RejectsBadLabelsAndLambda) {
  const Tensor logits(Shape{1, 2}, {0.0, 0.0});
  EXPECT_THROW(total_loss(logits, {2}, {}, {}, 0.0), ContractError);
  Graph g;
  EXPECT_THROW(total_loss(g, g.constant(logits), {0}, Graph::kNone, -1.0), ContractError);
}

TEST(TotalLoss, AttentionTermReachesGains) {
  BackboneConfig cfg;
  cfg.input_height = cfg.input_width = 8;
  cfg.stem_stride = 1;
  const Model m = build_model(cfg, 3);
  Rng rng(10);
  Graph g;
  const auto ids = attach(g, m, true);
  const auto f = build_forward(g, m, g.constant(random_tensor(rng, {2, 8, 8, 3})), ids, true);
  const auto [h, w] = cfg.attention_size();
  std::map<std::size_t, LayerTarget> targets;
  for (auto l : cfg.gala_layers)
    targets.emplace(l, LayerTarget{random_tensor(rng, {2, h, w, 1}, 0.0, 1.0), {1.0, 1.0}});
  const auto loss = total_loss(g, f.logits, {1, 7}, map_loss(g, f.attention, targets), 1.0);
  const auto grads = g.backward(loss);
  for (auto l : cfg.gala_layers) {
    for (const char* field : {"additive", "multiplicative"}) {
      const Tensor gr = grads.of(ids[m.index_of("block" + std::to_string(l) + ".gala." + field)]);
      double mag = 0.0;
      for (double v : gr.values()) mag += std::abs(v);
      EXPECT_GT(mag, 1e-8) << "block " << l << " " << field;
    }
  }
}

TEST(Augmentation, SameTransformForImageAndMap) {
  const std::size_t H = 7, W = 9;
  Image img(H, W, 2, 0.0);
  Grid<double> map(H, W, 0.0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      img.at(r, c, 0) = static_cast<double>(r + 1);
      img.at(r, c, 1) = static_cast<double>(c + 1);
      map(r, c) = static_cast<double>(r * W + c + 1);
    }
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Transform t = random_transform(rng, 3);
    ASSERT_LE(std::abs(t.dy), 3);
    ASSERT_LE(std::abs(t.dx), 3);
    const Image ti = apply_transform(t, img);
    const Grid<double> tm = apply_transform(t, map);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        if (tm(r, c) == 0.0) {
          EXPECT_EQ(ti.at(r, c, 0), 0.0);
          continue;
        }
        const auto src = static_cast<std::size_t>(tm(r, c)) - 1;
        EXPECT_EQ(ti.at(r, c, 0), static_cast<double>(src / W + 1));
        EXPECT_EQ(ti.at(r, c, 1), static_cast<double>(src % W + 1));
        // Rows shift by dy; columns flip then shift by dx.
        EXPECT_EQ(static_cast<std::ptrdiff_t>(src / W), static_cast<std::ptrdiff_t>(r) + t.dy);
        const std::ptrdiff_t col = t.flip ? static_cast<std::ptrdiff_t>(W - 1 - c) : static_cast<std::ptrdiff_t>(c);
        EXPECT_EQ(static_cast<std::ptrdiff_t>(src % W), col + t.dx);
      }
  }
}
