#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "pifield/training.hpp"
#include "tiny.hpp"

using namespace pifield;
using namespace pifield::testing;

namespace {

struct ThreadGuard {
  ~ThreadGuard() { set_thread_count(0); }
};

}  // namespace

TEST(Loss, LogSigmoidIdentity) {
  Rng rng(1, Stream::eval);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-30, 30);
    EXPECT_NEAR(log_sigmoid(u), u + log_sigmoid(-u), 1e-9) << u;
  }
}

TEST(Loss, LogSigmoidAsymptotics) {
  EXPECT_DOUBLE_EQ(log_sigmoid(0), -std::log(2.0));
  EXPECT_NEAR(log_sigmoid(-100), -100, 1e-12);
  EXPECT_TRUE(std::isfinite(log_sigmoid(-1e6)));
  EXPECT_NEAR(log_sigmoid(100), -std::exp(-100.0), 1e-50);
  EXPECT_LE(log_sigmoid(100), 0);
}

TEST(Loss, ZeroScoresGiveTwoLogTwo) {
  const std::vector<double> zeros(6, 0.0);
  for (double r1 : {0.0, 0.3})
    for (double lambda : {0.0, 1.0, 10.0}) {
      const auto l = gan_losses(zeros, zeros, r1, lambda);
      EXPECT_NEAR(l.d, 2 * std::log(2.0) + lambda * r1, 1e-15);
      EXPECT_NEAR(l.g, std::log(2.0), 1e-15);
    }
}

TEST(Loss, DirectionOfPreference) {
  // a discriminator that scores reals high and fakes low has small L_D, large L_G
  const auto good = gan_losses({5, 6}, {-5, -7}, 0, 1);
  const auto bad = gan_losses({-5, -6}, {5, 7}, 0, 1);
  EXPECT_LT(good.d, bad.d);
  EXPECT_GT(good.g, bad.g);
  EXPECT_GT(good.d, 0);
}

TEST(Loss, NonFiniteScoreRejected) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(gan_losses({0, nan}, {0}, 0, 1), std::runtime_error);
  EXPECT_THROW(gan_losses({0}, {std::numeric_limits<double>::infinity()}, 0, 1), std::runtime_error);
}

TEST(Schedule, LearningRateEndpointsAndMidpoint) {
  const std::uint64_t total = 3000;
  EXPECT_DOUBLE_EQ(lr_schedule(0, 5e-5, 1e-5, total), 5e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(total, 5e-5, 1e-5, total), 1e-5);
  EXPECT_NEAR(lr_schedule(total / 2, 5e-5, 1e-5, total), 3e-5, 1e-18);
  EXPECT_DOUBLE_EQ(lr_schedule(0, 4e-4, 1e-4, total), 4e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(total, 4e-4, 1e-4, total), 1e-4);
  for (std::uint64_t i = 1; i <= total; i += 37)
    EXPECT_LT(lr_schedule(i, 5e-5, 1e-5, total), lr_schedule(i - 1, 5e-5, 1e-5, total));
}

TEST(Schedule, BatchSizesPerStage) {
  const TrainConfig c;
  EXPECT_EQ(c.micro_batch(0), 120u);
  EXPECT_EQ(c.micro_batch(1), 30u);
  EXPECT_EQ(c.micro_batch(2), 7u);
  EXPECT_EQ(c.accumulation(0), 1u);
  EXPECT_EQ(c.accumulation(1), 1u);
  EXPECT_EQ(c.accumulation(2), 2u);
  EXPECT_EQ(c.effective_batch(2), 14u);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_GE(c.effective_batch(s), c.min_effective_batch);
}

TEST(Schedule, StageBoundariesFollowFractions) {
  TrainConfig c;
  EXPECT_EQ(c.stage_starts(), (std::vector<std::uint64_t>{1200, 2100}));
  c.stage_fractions = {0.5, 0.3};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.stage_fractions = {0.5, 0.5};
  EXPECT_THROW(c.validate(), std::invalid_argument);  // three discriminator stages
}

TEST(Schedule, DefaultsMatchOptimizerSettings) {
  const TrainConfig c;
  const auto s = TrainState<float>::create(tiny_config());
  EXPECT_EQ(c.adam_beta1, 0.0);
  EXPECT_EQ(c.adam_beta2, 0.9);
  EXPECT_EQ(s.opt_disc.beta1, 0.0);
  EXPECT_EQ(s.opt_field.beta2, 0.9);
  EXPECT_DOUBLE_EQ(s.opt_mapping.lr, s.opt_field.lr / 20);
  EXPECT_EQ(c.disc.fade_iters, 10000u);
}

TEST(Metrics, CsvHasEightFields) {
  StepMetrics m;
  m.iter = 3;
  m.loss_d = 1.5;
  const std::string line = m.csv();
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7);
  EXPECT_EQ(line.rfind("3,0,", 0), 0u);
}

TEST(TrainStep, RejectsWrongBatch) {
  auto s = TrainState<float>::create(tiny_config());
  auto reals = next_real_batch(s, tiny_data());
  reals.pop_back();
  EXPECT_THROW(train_step(s, reals), std::invalid_argument);
  std::vector<Tensor<float>> wrong(4, Tensor<float>(Shape{1, 3, 8, 8}));
  EXPECT_THROW(train_step(s, wrong), std::invalid_argument);
}

TEST(TrainStep, DeterministicAcrossThreadCounts) {
  ThreadGuard guard;
  const auto cfg = tiny_config();
  std::vector<TrainState<double>> runs;
  for (std::size_t threads : {1, 3, 4}) {
    set_thread_count(threads);
    auto s = TrainState<double>::create(cfg);
    for (int i = 0; i < 10; ++i) train_step(s, tiny_data());
    runs.push_back(std::move(s));
  }
  EXPECT_EQ(runs[0].disc.stage, 1u);  // crossed the growth boundary
  EXPECT_TRUE(same_state(runs[0], runs[1]));
  EXPECT_TRUE(same_state(runs[0], runs[2]));
  // and the run actually moved
  const auto fresh = TrainState<double>::create(cfg);
  EXPECT_FALSE(fresh.gen.field == runs[0].gen.field);
  EXPECT_FALSE(fresh.disc.params == runs[0].disc.params);
}

TEST(TrainStep, GrowsAtBoundaryAndFades) {
  auto s = TrainState<float>::create(tiny_config());
  std::vector<StepMetrics> log;
  for (int i = 0; i < 8; ++i) log.push_back(train_step(s, tiny_data()));
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(log[i].stage, 0u);
    EXPECT_EQ(log[i].alpha, 1.0);
  }
  EXPECT_EQ(log[5].stage, 1u);
  EXPECT_EQ(log[5].alpha, 0.0);
  EXPECT_EQ(log[6].alpha, 0.5);
  EXPECT_EQ(log[7].alpha, 1.0);
  for (const auto& m : log) {
    EXPECT_TRUE(std::isfinite(m.loss_d) && std::isfinite(m.loss_g) && std::isfinite(m.r1));
    EXPECT_FALSE(m.skipped);
  }
  EXPECT_LT(log[7].lr_g, log[0].lr_g);
}

TEST(TrainStep, UpdateIsolation) {
  auto s = TrainState<double>::create(tiny_config());
  const auto reals = next_real_batch(s, tiny_data());
  const auto fakes = render_fakes(s, 0, 0, reals.size());
  const auto gen_field = s.gen.field, gen_map = s.gen.mapping;
  discriminator_step(s, reals, fakes, 1e-3);
  EXPECT_TRUE(s.gen.field == gen_field && s.gen.mapping == gen_map);
  const auto disc = s.disc.params;
  generator_step(s, reals.size(), reals.size(), 1e-3);
  EXPECT_TRUE(s.disc.params == disc);
  EXPECT_FALSE(s.gen.field == gen_field);
}

TEST(TrainStep, EmaNeverFeedsGradients) {
  const auto cfg = tiny_config();
  auto a = TrainState<double>::create(cfg);
  auto b = TrainState<double>::create(cfg);
  for (auto& t : b.ema_field.shadow)
    for (auto& v : t.data()) v = std::numeric_limits<double>::quiet_NaN();
  for (auto& t : b.ema_mapping.shadow)
    for (auto& v : t.data()) v = 1e30;
  for (int i = 0; i < 3; ++i) {
    train_step(a, tiny_data());
    const auto m = train_step(b, tiny_data());
    EXPECT_FALSE(m.skipped);
  }
  EXPECT_TRUE(a.gen.field == b.gen.field);
  EXPECT_TRUE(a.gen.mapping == b.gen.mapping);
  EXPECT_TRUE(a.disc.params == b.disc.params);
}

TEST(TrainStep, EmaTracksLiveWeights) {
  auto cfg = tiny_config();
  cfg.ema_decay = 0.5;
  auto s = TrainState<double>::create(cfg);
  auto prev = s.ema_field.shadow;
  train_step(s, tiny_data());
  for (std::size_t i = 0; i < prev.size(); ++i)
    for (std::size_t k = 0; k < prev[i].size(); ++k)
      EXPECT_DOUBLE_EQ(s.ema_field.shadow[i][k], 0.5 * prev[i][k] + 0.5 * s.gen.field[i][k]);
  const auto g = s.ema_generator();
  EXPECT_EQ(g.field.values(), s.ema_field.shadow);
}

TEST(DiscriminatorStep, PenaltyUsesRealsOnlyAndMeanOverBatch) {
  auto cfg = tiny_config();
  cfg.r1_lambda = 2.5;
  auto s = TrainState<double>::create(cfg);
  const auto reals = next_real_batch(s, tiny_data());
  const auto fakes = render_fakes(s, 0, 0, reals.size());

  double expect_loss = 0, expect_r1 = 0;
  for (std::size_t i = 0; i < reals.size(); ++i) {
    Tape<double> tape;
    auto p = s.disc.bind(tape, false);
    auto real = tape.leaf(reals[i], true);
    const double r1 = r1_penalty(s.disc, p, real).value()[0];
    const double sr = s.disc.score(reals[i])[0], sf = s.disc.score(fakes[i])[0];
    expect_r1 += r1 / double(reals.size());
    expect_loss += gan_losses({sr}, {sf}, r1, cfg.r1_lambda).d / double(reals.size());
  }
  auto copy = s;
  const auto out = discriminator_step(copy, reals, fakes, 1e-3);
  EXPECT_NEAR(out.r1, expect_r1, 1e-12 * (1 + expect_r1));
  EXPECT_NEAR(out.loss, expect_loss, 1e-12 * (1 + expect_loss));
  EXPECT_GT(out.r1, 0);
}

TEST(DiscriminatorStep, LossFallsAgainstFrozenConstantGenerator) {
  auto cfg = tiny_config();
  cfg.r1_lambda = 0;
  cfg.iterations = 1000;
  auto s = TrainState<float>::create(cfg);
  const auto gen = s.gen.field;
  const std::size_t b = cfg.effective_batch(0);
  const std::vector<Tensor<float>> fakes(b, Tensor<float>(Shape{1, 3, 4, 4}, 0.5f));
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) {
    const auto reals = next_real_batch(s, tiny_data());
    losses.push_back(discriminator_step(s, reals, fakes, cfg.lr_d).loss);
  }
  EXPECT_TRUE(s.gen.field == gen);
  auto mean = [&](std::size_t lo, std::size_t hi) {
    double m = 0;
    for (std::size_t i = lo; i < hi; ++i) m += losses[i];
    return m / double(hi - lo);
  };
  EXPECT_NEAR(losses[0], 2 * std::log(2.0), 0.5);
  EXPECT_LT(mean(180, 200), 0.5 * mean(0, 20));
}

TEST(Train, CheckpointHookCadence) {
  auto cfg = tiny_config();
  cfg.checkpoint_every = 3;
  auto s = TrainState<float>::create(cfg);
  std::vector<std::uint64_t> at;
  std::size_t steps = 0;
  train(s, tiny_data(), 100, [&](const StepMetrics&) { ++steps; },
        [&](const TrainState<float>& st) { at.push_back(st.iter); });
  EXPECT_EQ(steps, 10u);
  EXPECT_EQ(at, (std::vector<std::uint64_t>{3, 5, 6, 9, 10}));
}

TEST(Train, RejectsDatasetBelowFinalResolution) {
  auto cfg = tiny_config();
  cfg.disc.resolutions = {8, 16};
  auto s = TrainState<float>::create(cfg);
  EXPECT_THROW(train(s, tiny_data(), 1, {}), std::invalid_argument);
}
