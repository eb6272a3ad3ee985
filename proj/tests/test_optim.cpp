#include <gtest/gtest.h>

#include <cmath>

#include "lesionfuse/optim.hpp"
#include "oracles.hpp"

using namespace lesionfuse;

namespace {

Tensor scalar_param(double w) {
  Tensor t({1}, w);
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& t, double g) {
  Tensor loss = mul(t, Tensor({1}, g));
  backward(sum(loss));
}

// Linearly separable 2-class problem: class decides the sign of the metadata and the
// image mean.
SplitData toy_split(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  SplitData s;
  s.images = Tensor({n, 1, 8, 8});
  s.metadata = Tensor({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double sign = y ? 1.0 : -1.0;
    s.labels.push_back(y);
    for (std::size_t p = 0; p < 64; ++p) s.images.data()[i * 64 + p] = sign + noise(rng);
    s.metadata.data()[i * 2] = 2 * sign + noise(rng);
    s.metadata.data()[i * 2 + 1] = -2 * sign + noise(rng);
  }
  return s;
}

FusionModel toy_model(std::uint64_t seed, FusionKind fusion = FusionKind::concat) {
  ModelConfig cfg;
  cfg.backbone.cnn.channels = {4, 4, 4};
  cfg.fusion.kind = fusion;
  cfg.reducer_dim = 8;
  return build_model(cfg, {1, 8, 8}, 2, 2, seed);
}

}  // namespace

TEST(Sgd, PlainGradientStep) {
  Tensor w = scalar_param(1.0);
  Sgd opt({{"w", w}}, {0.1, 0.0, 0.0});
  set_grad(w, 1.0);
  opt.step();
  EXPECT_DOUBLE_EQ(w[0], 0.9);
  EXPECT_FALSE(w.has_grad());
}

TEST(Sgd, MomentumRecurrence) {
  Tensor w = scalar_param(1.0);
  Sgd opt({{"w", w}}, {0.1, 0.9, 0.0});
  // Hand-rolled recurrence: v1 = 1, v2 = 0.9 + 1 = 1.9.
  double v = 0, ref = 1.0;
  for (int step = 0; step < 2; ++step) {
    set_grad(w, 1.0);
    opt.step();
    v = 0.9 * v + 1.0;
    ref -= 0.1 * v;
    EXPECT_DOUBLE_EQ(opt.velocity(0)[0], v);
  }
  EXPECT_NEAR(w[0], 0.71, 1e-15);
  EXPECT_DOUBLE_EQ(w[0], ref);
}

TEST(Sgd, PureDecay) {
  Tensor w = scalar_param(1.0);
  Sgd opt({{"w", w}}, {0.001, 0.0, 0.001});
  set_grad(w, 0.0);
  opt.step();
  EXPECT_NEAR(w[0], 1.0 - 1e-6, 1e-16);
}

TEST(Sgd, FirstStepUsesZeroVelocity) {
  Tensor w = scalar_param(2.0);
  Sgd opt({{"w", w}}, {0.05, 0.9, 0.01});
  set_grad(w, 0.3);
  opt.step();
  EXPECT_DOUBLE_EQ(w[0], 2.0 - 0.05 * (0.3 + 0.01 * 2.0));
}

TEST(Sgd, DescendsOnQuadratic) {
  Tensor w = scalar_param(3.0);
  Sgd opt({{"w", w}}, {0.01, 0.9, 0.0});
  auto loss = [&] { return 0.5 * (w[0] - 1.0) * (w[0] - 1.0); };
  const double before = loss();
  Tensor d = add(w, Tensor({1}, -1.0));
  backward(scale(sum(mul(d, d)), 0.5));
  opt.step();
  EXPECT_LT(loss(), before);
}

TEST(Sgd, MissingGradientNamesParameter) {
  Tensor a = scalar_param(1.0), b = scalar_param(1.0);
  Sgd opt({{"a", a}, {"dead", b}}, {});
  set_grad(a, 1.0);
  try {
    opt.step();
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("\"dead\""), std::string::npos);
  }
}

TEST(Sgd, InvalidConfig) {
  EXPECT_THROW((SgdConfig{0.0, 0.9, 0.0}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1, 1.0, 0.0}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1, 0.5, -1.0}.validate()), ConfigError);
}

TEST(Plateau, ConstantLossDropsAfter11_22_33ThenClamps) {
  PlateauScheduler s(0.001);
  s.step(1.0);  // epoch 0 baseline
  std::vector<double> lr_after(60);
  for (std::size_t e = 1; e < 60; ++e) lr_after[e] = s.step(1.0);
  for (std::size_t e = 1; e < 11; ++e) EXPECT_EQ(lr_after[e], 0.001) << e;
  for (std::size_t e = 11; e < 22; ++e) EXPECT_NEAR(lr_after[e], 1e-4, 1e-18) << e;
  for (std::size_t e = 22; e < 33; ++e) EXPECT_NEAR(lr_after[e], 1e-5, 1e-19) << e;
  for (std::size_t e = 33; e < 60; ++e) EXPECT_NEAR(lr_after[e], 1e-6, 1e-20) << e;
  EXPECT_EQ(lr_after[59], 1e-6);  // a later drop lands exactly on the floor
}

TEST(Plateau, DecreasingLossKeepsLearningRate) {
  PlateauScheduler s(0.001);
  for (int e = 0; e <= 150; ++e) EXPECT_EQ(s.step(10.0 - e * 0.01), 0.001);
}

TEST(Plateau, ImprovementResetsCounter) {
  PlateauScheduler s(0.001);
  s.step(1.0);
  for (int e = 1; e <= 9; ++e) s.step(1.0);
  s.step(0.5);  // epoch 10 improves
  EXPECT_EQ(s.epochs_since_improvement(), 0u);
  for (int e = 11; e <= 150; ++e) EXPECT_EQ(s.step(0.5 - e * 1e-3), 0.001);
}

TEST(Plateau, MaximizeMode) {
  PlateauScheduler s(0.001, {}, MetricMode::maximize);
  s.step(0.5);
  for (int e = 1; e <= 10; ++e) s.step(0.4);
  EXPECT_EQ(s.lr(), 0.001);
  EXPECT_NEAR(s.step(0.4), 1e-4, 1e-18);
}

TEST(Plateau, LearningRateNonIncreasingAndBounded) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    PlateauScheduler s(0.001);
    double prev = s.lr();
    for (int e = 0; e < 150; ++e) {
      const double lr = s.step(u(rng));
      EXPECT_LE(lr, prev);
      EXPECT_GE(lr, 1e-6);
      EXPECT_LE(lr, 0.001);
      prev = lr;
    }
  }
}

TEST(Plateau, NanIsTrainingFault) {
  PlateauScheduler s(0.001);
  EXPECT_THROW(s.step(std::nan("")), TrainingFault);
}

TEST(EarlyStop, BestAtThreeStopsAtEighteen) {
  EarlyStopper stop(15);
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e <= 150 && !stopped_at; ++e) {
    const double m = e <= 3 ? 10.0 - static_cast<double>(e) : 7.0;  // tie with best after epoch 3
    if (stop.update(m, e)) stopped_at = e;
  }
  EXPECT_EQ(stopped_at, 18u);
  EXPECT_EQ(stop.best_epoch(), 3u);
}

TEST(EarlyStop, MonotoneImprovementNeverStops) {
  EarlyStopper stop(15);
  for (std::size_t e = 0; e <= 150; ++e) EXPECT_FALSE(stop.update(-static_cast<double>(e), e));
}

TEST(EarlyStop, Errors) {
  EarlyStopper stop(15);
  EXPECT_THROW(stop.update(std::nan(""), 0), TrainingFault);
  stop.update(1.0, 3);
  EXPECT_THROW(stop.update(1.0, 3), ContractError);
  EXPECT_THROW(EarlyStopper(0), ConfigError);
}

TEST(Train, SeparableToyProblem) {
  FusionModel model = toy_model(1);
  SplitData train = toy_split(60, 2), val = toy_split(20, 3);
  TrainConfig tc;
  tc.max_epochs = 50;
  auto r = train_model(model, train, val, 2, tc, {}, {});
  ASSERT_FALSE(r.history.empty());
  EXPECT_LT(r.history.back().train_loss, std::log(2.0));
  auto ev = evaluate(model, val, 2);
  EXPECT_EQ(ev.bcc, 1.0);
}

TEST(Train, FixedSeedGivesIdenticalHistory) {
  SplitData train = toy_split(40, 4), val = toy_split(10, 5);
  TrainConfig tc;
  tc.max_epochs = 8;
  tc.seed = 11;
  FusionModel a = toy_model(6, FusionKind::metablock), b = toy_model(6, FusionKind::metablock);
  auto ra = train_model(a, train, val, 2, tc, {}, {});
  auto rb = train_model(b, train, val, 2, tc, {}, {});
  EXPECT_EQ(ra.history, rb.history);
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
}

TEST(Train, RestoresBestEpochParameters) {
  SplitData train = toy_split(40, 7), val = toy_split(10, 8);
  TrainConfig tc;
  tc.max_epochs = 150;
  // Known argmin at epoch 5.
  auto v_shape = [](std::size_t epoch, double, double) { return std::abs(static_cast<double>(epoch) - 5.0); };
  FusionModel model = toy_model(9);
  auto r = train_model(model, train, val, 2, tc, {}, {}, v_shape);
  EXPECT_EQ(r.best_epoch, 5u);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.history.size(), 20u);

  // Same trajectory cut at epoch 5 (metric keeps improving, so the last epoch is best).
  TrainConfig short_tc = tc;
  short_tc.max_epochs = 5;
  FusionModel reference = toy_model(9);
  auto decreasing = [](std::size_t epoch, double, double) { return -static_cast<double>(epoch); };
  train_model(reference, train, val, 2, short_tc, {}, {}, decreasing);
  auto p = model.parameters(), q = reference.parameters();
  for (std::size_t i = 0; i < p.size(); ++i)
    EXPECT_TRUE(std::equal(p[i].data().begin(), p[i].data().end(), q[i].data().begin()));
}

TEST(Train, HistoryBoundedByProtocol) {
  SplitData train = toy_split(30, 10), val = toy_split(10, 11);
  TrainConfig tc;
  tc.max_epochs = 150;
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> metric(151);
  for (auto& m : metric) m = u(rng);
  FusionModel model = toy_model(13);
  auto r = train_model(model, train, val, 2, tc, {}, {}, [&](std::size_t e, double, double) { return metric[e]; });
  EXPECT_LE(r.history.size(), 150u);
  EXPECT_LE(r.history.size(), r.best_epoch + 15);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i].lr, r.history[i - 1].lr);
}

TEST(Train, EmptySplitIsConfigError) {
  FusionModel model = toy_model(14);
  SplitData train = toy_split(10, 15), empty;
  EXPECT_THROW(train_model(model, train, empty, 2, {}, {}, {}), ConfigError);
  EXPECT_THROW(train_model(model, empty, train, 2, {}, {}, {}), ConfigError);
}

TEST(Train, NanLossNamesEpochAndBatch) {
  FusionModel model = toy_model(16);
  SplitData train = toy_split(40, 17), val = toy_split(10, 18);
  train.metadata.data()[0] = std::nan("");
  TrainConfig tc;
  tc.max_epochs = 3;
  try {
    train_model(model, train, val, 2, tc, {}, {});
    FAIL();
  } catch (const TrainingFault& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
  EXPECT_EQ(Tape::current().size(), 0u);
}
