#include <gtest/gtest.h>

#include <cmath>

#include "gala/synthetic.hpp"
#include "gala/train.hpp"
#include "test_util.hpp"

using namespace gala;

namespace {

BackboneConfig small_model() {
  BackboneConfig c;
  c.input_height = c.input_width = 16;
  c.stem_width = 4;
  c.stage_widths = {4, 8};
  c.blocks_per_stage = {1, 1};
  c.gala_layers = {1};
  return c;
}

SyntheticConfig small_data(std::size_t count, std::uint64_t seed) {
  SyntheticConfig s;
  s.count = count;
  s.size = 16;
  s.seed = seed;
  s.target_min = 3.5;
  s.target_max = 5.0;
  s.distractor_min = 1.5;
  s.distractor_max = 2.0;
  s.distractors_min = 1;
  s.distractors_max = 2;
  return s;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.decay_epochs = {};
  t.batch_size = 8;
  t.map_blur_kernel = 3;
  t.lambda = 1.0;
  return t;
}

}  // namespace

TEST(Fit, RecordsStepSchedule) {
  const Dataset train = make_synthetic(small_data(16, 1));
  TrainConfig t = quick(6);
  t.base_lr = 0.02;
  t.decay_epochs = {2, 4};
  std::vector<double> seen;
  const auto r = fit(build_model(small_model(), 1), train, {}, t, [&](const EpochRecord& e) {
    seen.push_back(e.learning_rate);
  });
  const std::vector<double> expected{0.02, 0.02, 0.002, 0.002, 0.0002, 0.0002};
  ASSERT_EQ(r.report.epochs.size(), 6u);
  ASSERT_EQ(seen.size(), 6u);
  for (std::size_t e = 0; e < 6; ++e) {
    EXPECT_NEAR(r.report.epochs[e].learning_rate, expected[e], 1e-15);
    EXPECT_EQ(r.report.epochs[e].epoch, e);
    EXPECT_EQ(seen[e], r.report.epochs[e].learning_rate);
  }
  EXPECT_EQ(r.report.step_losses.size(), 12u);
}

TEST(Fit, OverfitsOneBatch) {
  Dataset train = make_synthetic(small_data(8, 2));
  TrainConfig t = quick(200);
  t.lambda = 0.0;
  t.augment = false;
  const auto r = fit(build_model(small_model(), 2), train, {}, t);
  ASSERT_EQ(r.report.step_losses.size(), 200u);
  EXPECT_LT(r.report.epochs.back().train_ce, 0.05);
  EXPECT_LT(r.report.step_losses.back(), 0.05);
}

TEST(Fit, LambdaZeroMatchesMapFreeData) {
  const Dataset train = make_synthetic(small_data(24, 3));
  TrainConfig t = quick(2);
  t.lambda = 0.0;
  const Model init = build_model(small_model(), 3);
  const auto a = fit(init, train, {}, t);
  const auto b = fit(init, strip_maps(train), {}, t);
  EXPECT_EQ(a.report.step_losses, b.report.step_losses);
  for (std::size_t i = 0; i < a.model.parameters().size(); ++i)
    EXPECT_EQ(a.model.parameters()[i].value, b.model.parameters()[i].value) << a.model.parameters()[i].name;
  // Without maps the attention term is absent whatever lambda is.
  t.lambda = 5.0;
  const auto c = fit(init, strip_maps(train), {}, t);
  EXPECT_EQ(a.report.step_losses, c.report.step_losses);
  // The map term is monitored even when it is not optimized.
  EXPECT_TRUE(std::isfinite(a.report.epochs[0].train_map_loss));
  EXPECT_TRUE(std::isnan(b.report.epochs[0].train_map_loss));
}

TEST(Fit, LambdaChangesTheTrajectory) {
  const Dataset train = make_synthetic(small_data(16, 4));
  TrainConfig t = quick(1);
  const Model init = build_model(small_model(), 4);
  t.lambda = 0.0;
  const auto a = fit(init, train, {}, t);
  t.lambda = 2.0;
  const auto b = fit(init, train, {}, t);
  EXPECT_NE(a.report.step_losses, b.report.step_losses);
  // Same weights and first batch: the second run adds a positive map term.
  EXPECT_GT(b.report.step_losses[0], a.report.step_losses[0]);
}

TEST(Fit, DeterministicForSeed) {
  const Dataset train = make_synthetic(small_data(16, 5));
  const Model init = build_model(small_model(), 5);
  TrainConfig t = quick(2);
  t.seed = 9;
  const auto a = fit(init, train, {}, t);
  const auto b = fit(init, train, {}, t);
  EXPECT_EQ(a.report.step_losses, b.report.step_losses);
  t.seed = 10;
  const auto c = fit(init, train, {}, t);
  EXPECT_NE(a.report.step_losses, c.report.step_losses);
}

TEST(Fit, SelectsBestValidationEpoch) {
  const Dataset train = make_synthetic(small_data(32, 6));
  const Dataset val = make_synthetic(small_data(24, 60));
  TrainConfig t = quick(5);
  t.base_lr = 0.1;
  const auto r = fit(build_model(small_model(), 6), train, val, t);
  ASSERT_EQ(r.report.epochs.size(), 5u);
  double best = 1e9;
  std::size_t arg = 0;
  for (const auto& e : r.report.epochs) {
    if (e.val_error < best) {
      best = e.val_error;
      arg = e.epoch;
    }
  }
  EXPECT_EQ(r.report.selected_epoch, arg);
  EXPECT_EQ(evaluate(r.model, val, t).error, r.report.epochs[arg].val_error);
  EXPECT_TRUE(std::isfinite(r.report.epochs[arg].val_map_loss));
  EXPECT_TRUE(std::isfinite(r.report.epochs[arg].val_explained_variability));
}

TEST(Fit, UpdatesRunningStatistics) {
  const Dataset train = make_synthetic(small_data(16, 7));
  const Model init = build_model(small_model(), 7);
  const auto r = fit(init, train, {}, quick(1));
  EXPECT_NE(r.model.param("head.norm.running_mean"), init.param("head.norm.running_mean"));
  EXPECT_NE(r.model.param("block0.norm1.running_var"), init.param("block0.norm1.running_var"));
}

TEST(Fit, ControlModesTrain) {
  const Dataset train = make_synthetic(small_data(16, 8));
  const Model init = build_model(small_model(), 8);
  for (auto mode : {SupervisionMode::bbox, SupervisionMode::feature}) {
    TrainConfig t = quick(1);
    t.supervision = mode;
    const auto r = fit(init, train, train, t);
    EXPECT_TRUE(std::isfinite(r.report.epochs[0].train_map_loss)) << to_string(mode);
    EXPECT_TRUE(std::isfinite(r.report.epochs[0].val_map_loss)) << to_string(mode);
  }
}

TEST(Fit, RejectsBadData) {
  const Model init = build_model(small_model(), 9);
  EXPECT_THROW(fit(init, {}, {}, quick(1)), DataError);
  Dataset bad = make_synthetic(small_data(2, 9));
  bad[1].label = 10;
  EXPECT_THROW(fit(init, bad, {}, quick(1)), DataError);
  Dataset wrong_size = make_synthetic(small_data(2, 9));
  wrong_size[0].image = Image(8, 8, 3, 0.0);
  EXPECT_THROW(fit(init, wrong_size, {}, quick(1)), DataError);
  TrainConfig t = quick(1);
  t.decay_epochs = {3};
  EXPECT_THROW(fit(init, make_synthetic(small_data(2, 9)), {}, t), ContractError);
}

TEST(Fit, DivergenceIsReported) {
  const Dataset train = make_synthetic(small_data(16, 10));
  TrainConfig t = quick(20);
  t.base_lr = 1e200;
  try {
    fit(build_model(small_model(), 10), train, {}, t);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("fit:"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, ErrorsAndRanking) {
  const Tensor logits(Shape{2, 6}, {0.1, 0.5, 0.3, 0.9, -1.0, 0.2, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(argmax_row(logits, 0), 3u);
  EXPECT_EQ(argmax_row(logits, 1), 0u);
  EXPECT_EQ(ranked_classes(logits, 0), (std::vector<std::size_t>{3, 1, 2, 5, 0, 4}));
  EXPECT_EQ(ranked_classes(logits, 1), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));

  const Dataset data = make_synthetic(small_data(10, 11));
  const Model m = build_model(small_model(), 11);
  const auto ev = evaluate(m, data, quick(1), 3);
  ASSERT_EQ(ev.predictions.size(), 10u);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < 10; ++i) wrong += ev.predictions[i] != data[i].label;
  EXPECT_DOUBLE_EQ(ev.error, 10.0 * static_cast<double>(wrong));
  EXPECT_LE(ev.top5_error, ev.error);
  EXPECT_EQ(ev.model_maps.size(), 10u);
  EXPECT_EQ(ev.model_maps.begin()->second.height(), 4u);
  // Batch size must not change results.
  const auto ev1 = evaluate(m, data, quick(1), 1);
  EXPECT_EQ(ev1.predictions, ev.predictions);
  EXPECT_NEAR(ev1.map_loss, ev.map_loss, 1e-12);
}

TEST(Evaluate, CollapsedMapsAverageLayers) {
  const Tensor a(Shape{1, 1, 2, 2}, {3.0, 4.0, 0.0, 1.0});
  const Tensor b(Shape{1, 1, 2, 1}, {1.0, 3.0});
  const auto maps = collapsed_maps({{0, a}, {1, b}});
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_DOUBLE_EQ(maps[0](0, 0), 3.0);
  EXPECT_DOUBLE_EQ(maps[0](0, 1), 2.0);
  EXPECT_THROW(collapsed_maps({}), ContractError);
}
