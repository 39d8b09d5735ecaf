// Training loop: the masked three-term loss against a double-loop reference,
// target-only gradient flow, optimizer convergence on a quadratic, batch
// stepping, and the fit/validate/checkpoint cycle on a toy dataset.

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>

#include "sadi/nn/grad_check.hpp"
#include "sadi/trainer.hpp"

using namespace sadi;
using nn::Tensor;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.L = 8;
  c.K = 4;
  c.n_fde = 1;
  c.n_gta = 1;
  c.d_model = 4;
  c.heads = 2;
  c.d_emb = 4;
  c.T = 4;
  return c;
}

TimeSeriesBatch random_batch(int windows, int L, int K, Rng& rng, double p_obs = 1.0) {
  TimeSeriesBatch b;
  for (int w = 0; w < windows; ++w) {
    Matrix x(L, K), m(L, K);
    for (size_t i = 0; i < x.v.size(); ++i) {
      m.v[i] = rng.uniform() < p_obs ? 1.0 : 0.0;
      if (m.v[i] == 1.0) x.v[i] = rng.normal();
    }
    b.values.push_back(std::move(x));
    b.observed.push_back(std::move(m));
  }
  return b;
}

// Smooth per-feature sinusoids with small noise: enough structure that even a
// briefly trained model beats sampling from an untrained one.
TimeSeriesBatch wave_batch(int windows, int L, int K, Rng& rng) {
  TimeSeriesBatch b;
  for (int w = 0; w < windows; ++w) {
    Matrix x(L, K);
    const double phase = rng.uniform() * 2.0 * M_PI;
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < K; ++j)
        x(i, j) = 1.5 * std::sin(2.0 * M_PI * double(i) / 12.0 + phase + 0.5 * j) + 0.1 * rng.normal();
    b.values.push_back(std::move(x));
    b.observed.push_back(Matrix(L, K, 1.0));
  }
  return b;
}

double reference_loss(const Matrix& eps, const Matrix& e1, const Matrix& e2, const Matrix& et, const Matrix& tm) {
  double n = 0.0, acc = 0.0;
  for (int i = 0; i < eps.rows; ++i)
    for (int j = 0; j < eps.cols; ++j) {
      if (tm(i, j) != 1.0) continue;
      n += 1.0;
      const double dt = eps(i, j) - et(i, j);
      const double d1 = eps(i, j) - e1(i, j);
      const double d2 = eps(i, j) - e2(i, j);
      acc += dt * dt + (d1 * d1 + d2 * d2) / 2.0;
    }
  return acc / (2.0 * n);
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / "sadi_trainer_test";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(MaskedLossTest, SingleTargetHandValue) {
  Matrix eps(1, 1, 1.0), zero(1, 1), mask(1, 1, 1.0);
  Tensor z = Tensor::constant(zero);
  Tensor loss = masked_loss(eps, z, z, z, mask);
  EXPECT_DOUBLE_EQ(loss.value()(0, 0), 1.0);
}

TEST(MaskedLossTest, PerfectPredictionIsZero) {
  Rng rng(1);
  Matrix eps(3, 3), mask(3, 3);
  for (size_t i = 0; i < eps.v.size(); ++i) {
    mask.v[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    eps.v[i] = rng.normal();
  }
  mask.v[4] = 1.0;
  Tensor p = Tensor::constant(eps);
  EXPECT_DOUBLE_EQ(masked_loss(eps, p, p, p, mask).value()(0, 0), 0.0);
}

TEST(MaskedLossTest, MatchesDoubleLoopReference) {
  Rng rng(2);
  for (int rep = 0; rep < 30; ++rep) {
    const int L = 2 + int(rng.uniform_int(0, 4)), K = 2 + int(rng.uniform_int(0, 4));
    Matrix eps(L, K), e1(L, K), e2(L, K), et(L, K), mask(L, K);
    for (size_t i = 0; i < eps.v.size(); ++i) {
      eps.v[i] = rng.normal();
      e1.v[i] = rng.normal();
      e2.v[i] = rng.normal();
      et.v[i] = rng.normal();
      mask.v[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    mask.v[0] = 1.0;
    Tensor loss = masked_loss(eps, Tensor::constant(e1), Tensor::constant(e2), Tensor::constant(et), mask);
    EXPECT_NEAR(loss.value()(0, 0), reference_loss(eps, e1, e2, et, mask), 1e-12);
  }
}

TEST(MaskedLossTest, NonTargetCellsInertInValueAndGradient) {
  Rng rng(3);
  const int L = 4, K = 3;
  nn::ParamStore ps;
  ps.add("e1", nn::fan_in_uniform(rng, L, K, K));
  ps.add("e2", nn::fan_in_uniform(rng, L, K, K));
  ps.add("et", nn::fan_in_uniform(rng, L, K, K));
  Matrix mask(L, K);
  mask(0, 0) = mask(1, 2) = mask(3, 1) = 1.0;
  Matrix eps(L, K);
  for (auto& e : eps.v) e = rng.normal();

  auto run = [&](const Matrix& noise) {
    Tensor loss = masked_loss(noise, ps.at("e1"), ps.at("e2"), ps.at("et"), mask);
    nn::GradBuffer buf;
    nn::backprop(loss, buf);
    return std::pair<double, Matrix>(loss.value()(0, 0), *buf.find(ps.at("et")));
  };

  auto [base_loss, base_grad] = run(eps);
  Matrix poked = eps;
  for (size_t i = 0; i < mask.v.size(); ++i)
    if (mask.v[i] == 0.0) poked.v[i] += 1e6;
  auto [poked_loss, poked_grad] = run(poked);

  EXPECT_EQ(std::bit_cast<uint64_t>(base_loss), std::bit_cast<uint64_t>(poked_loss));
  for (size_t i = 0; i < base_grad.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(base_grad.v[i]), std::bit_cast<uint64_t>(poked_grad.v[i]));
}

TEST(MaskedLossTest, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  const int L = 3, K = 3;
  nn::ParamStore ps;
  ps.add("e1", nn::fan_in_uniform(rng, L, K, K));
  ps.add("e2", nn::fan_in_uniform(rng, L, K, K));
  ps.add("et", nn::fan_in_uniform(rng, L, K, K));
  Matrix mask(L, K);
  mask(0, 1) = mask(2, 2) = mask(1, 0) = 1.0;
  Matrix eps(L, K);
  for (auto& e : eps.v) e = rng.normal();
  auto f = [&] { return masked_loss(eps, ps.at("e1"), ps.at("e2"), ps.at("et"), mask); };
  auto res = nn::grad_check(f, ps);
  EXPECT_LT(res.max_rel_err, 1e-8);
}

TEST(MaskedLossTest, Errors) {
  Matrix eps(2, 2);
  Tensor z = Tensor::constant(Matrix(2, 2));
  EXPECT_THROW(masked_loss(eps, z, z, z, Matrix(2, 2)), DataError);       // no targets
  EXPECT_THROW(masked_loss(eps, z, z, z, Matrix(2, 2, 0.3)), ArgError);   // non-binary
  EXPECT_THROW(masked_loss(Matrix(3, 2), z, z, z, Matrix(2, 2)), DimError);
}

TEST(MaskedLossTest, AdamDrivesToQuadraticOptimum) {
  // With all three predictions tied to one scalar parameter the loss is
  // (eps - theta)^2; the optimizer must find the least-squares optimum.
  nn::ParamStore ps;
  ps.add("theta", Matrix(1, 1));
  Matrix eps(1, 1, 0.7), mask(1, 1, 1.0);
  nn::AdamState opt;
  opt.cfg.lr = 0.05;
  for (int step = 0; step < 400; ++step) {
    Tensor loss = masked_loss(eps, ps.at("theta"), ps.at("theta"), ps.at("theta"), mask);
    nn::GradBuffer buf;
    nn::backprop(loss, buf);
    nn::GradMap grads{{"theta", *buf.find(ps.at("theta"))}};
    nn::adam_step(ps, grads, opt);
  }
  EXPECT_NEAR(ps.at("theta").value()(0, 0), 0.7, 1e-3);
}

TEST(TrainStepTest, DeterministicAcrossRuns) {
  ModelConfig mc = tiny_model_config();
  TrainConfig tc;
  tc.batch_size = 4;
  Rng data_rng(5);
  TimeSeriesBatch batch = random_batch(4, mc.L, mc.K, data_rng, 0.8);

  auto run = [&](uint64_t seed) {
    Rng init(6);
    Denoiser model(mc, init);
    nn::AdamState opt;
    opt.cfg.lr = tc.lr;
    Rng rng(seed);
    double loss = train_step(model, batch, tc, opt, rng);
    return std::pair<double, Matrix>(loss, model.params().at("gta1.0.attn.q.w").value());
  };
  auto [l1, p1] = run(7);
  auto [l2, p2] = run(7);
  EXPECT_EQ(std::bit_cast<uint64_t>(l1), std::bit_cast<uint64_t>(l2));
  for (size_t i = 0; i < p1.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(p1.v[i]), std::bit_cast<uint64_t>(p2.v[i]));
}

TEST(TrainStepTest, SkipsWindowsWithoutObservations) {
  ModelConfig mc = tiny_model_config();
  TrainConfig tc;
  Rng data_rng(8);
  TimeSeriesBatch batch = random_batch(2, mc.L, mc.K, data_rng, 0.9);
  batch.observed[1] = Matrix(mc.L, mc.K);  // fully unobserved window
  batch.values[1] = Matrix(mc.L, mc.K);

  Rng init(9);
  Denoiser model(mc, init);
  nn::AdamState opt;
  Rng rng(10);
  EXPECT_TRUE(std::isfinite(train_step(model, batch, tc, opt, rng)));

  TimeSeriesBatch dead;
  dead.values.assign(2, Matrix(mc.L, mc.K));
  dead.observed.assign(2, Matrix(mc.L, mc.K));
  EXPECT_THROW(train_step(model, dead, tc, opt, rng), DataError);
  EXPECT_THROW(train_step(model, TimeSeriesBatch{}, tc, opt, rng), ArgError);
  TrainConfig bad = tc;
  bad.rm_fraction = 1.5;
  EXPECT_THROW(train_step(model, batch, bad, opt, rng), ConfigError);
}

TEST(TrainStepTest, HundredStepSmoke) {
  ModelConfig mc = tiny_model_config();
  TrainConfig tc;
  tc.strategy = MaskStrategy::mpb;
  tc.pb_prob = 0.5;
  Rng data_rng(11);
  TimeSeriesBatch batch = random_batch(3, mc.L, mc.K, data_rng, 0.9);
  Rng init(12);
  Denoiser model(mc, init);
  nn::AdamState opt;
  Rng rng(13);
  for (int step = 0; step < 100; ++step) {
    const double loss = train_step(model, batch, tc, opt, rng);
    ASSERT_TRUE(std::isfinite(loss)) << "step " << step;
  }
  for (const auto& [name, p] : model.params().entries)
    for (double e : p.value().v) ASSERT_TRUE(std::isfinite(e)) << name;
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(validate_train_config(c));
  c.strategy = MaskStrategy::mpb;
  EXPECT_THROW(validate_train_config(c, false), ConfigError);  // cold start
  EXPECT_NO_THROW(validate_train_config(c, true));
  c.rm_fraction = 0.0;
  EXPECT_THROW(validate_train_config(c, true), ConfigError);

  TrainConfig d;
  d.epochs = 7;
  d.val_pattern.block_len = 9;
  d.checkpoint_path = "x/y";
  TrainConfig r = train_config_from_json(train_config_to_json(d));
  EXPECT_EQ(r.epochs, 7);
  EXPECT_EQ(r.val_pattern.block_len, 9);
  EXPECT_EQ(r.checkpoint_path, "x/y");
  auto j = train_config_to_json(d);
  j.erase("lr");
  EXPECT_THROW(train_config_from_json(j), DataError);
}

TEST(FitTest, LearnsStructuredToyData) {
  ModelConfig mc;
  mc.L = 24;
  mc.K = 4;
  mc.n_fde = 1;
  mc.n_gta = 1;
  mc.d_model = 8;
  mc.heads = 2;
  mc.d_emb = 8;
  mc.T = 8;
  Rng init(14);
  Denoiser model(mc, init);

  Rng data_rng(15);
  TimeSeriesBatch train = wave_batch(40, mc.L, mc.K, data_rng);
  TimeSeriesBatch val = wave_batch(6, mc.L, mc.K, data_rng);

  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.val_every = 5;
  tc.val_samples = 2;
  tc.val_pattern = {2, 2, 3};
  tc.seed = 16;
  tc.checkpoint_path = (temp_dir() / "toy").string();

  // Baseline: the same fixed validation masks scored on the fresh model.
  Rng vm_rng = Rng(tc.seed).fork(3);
  std::vector<MaskPair> val_masks;
  for (size_t w = 0; w < val.size(); ++w)
    val_masks.push_back(pb_eval_pattern(val.observed[w], tc.val_pattern, vm_rng));
  const double init_mse = validation_mse(model, val, val_masks, tc.val_samples, Rng(99));

  FitResult res = fit(model, train, val, tc);
  ASSERT_EQ(res.history.size(), 30u);
  EXPECT_EQ(res.skipped_batches, 0);
  EXPECT_GT(res.best_epoch, 0);
  EXPECT_LT(res.best_val, init_mse);
  for (const HistoryRow& r : res.history) {
    EXPECT_TRUE(std::isfinite(r.train_loss));
    if (r.epoch % tc.val_every == 0 || r.epoch == tc.epochs)
      EXPECT_TRUE(std::isfinite(r.val_mse));
    else
      EXPECT_TRUE(std::isnan(r.val_mse));
  }
  EXPECT_TRUE(std::filesystem::exists(tc.checkpoint_path + ".json"));

  // Restored parameters reproduce validation bit-for-bit.
  auto ck = nn::load_checkpoint(tc.checkpoint_path);
  EXPECT_EQ(model_config_from_json(ck.extra.at("model")).L, mc.L);
  Denoiser restored(mc, std::move(ck.params));
  const double a = validation_mse(restored, val, val_masks, tc.val_samples, Rng(4242));
  const double b = validation_mse(restored, val, val_masks, tc.val_samples, Rng(4242));
  EXPECT_EQ(std::bit_cast<uint64_t>(a), std::bit_cast<uint64_t>(b));
  EXPECT_TRUE(std::isfinite(a));
}

TEST(FitTest, ZeroEpochWarmStartLeavesParamsUntouched) {
  ModelConfig mc = tiny_model_config();
  Rng init(17);
  Denoiser model(mc, init);
  Matrix before = model.params().at("input_pos.table").value();

  Rng data_rng(18);
  TimeSeriesBatch train = random_batch(3, mc.L, mc.K, data_rng);
  TrainConfig tc;
  tc.epochs = 0;
  tc.strategy = MaskStrategy::mpb;
  FitResult res = fit(model, train, TimeSeriesBatch{}, tc, true);
  EXPECT_TRUE(res.history.empty());
  const Matrix& after = model.params().at("input_pos.table").value();
  for (size_t i = 0; i < before.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(before.v[i]), std::bit_cast<uint64_t>(after.v[i]));
}

TEST(FitTest, NonFiniteLossAborts) {
  ModelConfig mc = tiny_model_config();
  Rng init(19);
  Denoiser model(mc, init);
  model.params().at("gta1.agg.b").mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Rng data_rng(20);
  TimeSeriesBatch train = random_batch(3, mc.L, mc.K, data_rng);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(fit(model, train, TimeSeriesBatch{}, tc), NumericError);
}

TEST(HistoryCsvTest, ExactFormatting) {
  std::vector<HistoryRow> rows(2);
  rows[0].epoch = 1;
  rows[0].train_loss = 0.5;
  rows[1].epoch = 2;
  rows[1].train_loss = 0.25;
  rows[1].val_mse = 1.5;
  EXPECT_EQ(history_to_csv(rows), "epoch,train_loss,val_mse\n1,0.5,\n2,0.25,1.5\n");
}
