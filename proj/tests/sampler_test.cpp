// Reverse-diffusion sampling: closed-form inversion oracles, merge and
// immutability invariants, ensemble statistics, and chain determinism.

#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "sadi/sampler.hpp"

using namespace sadi;

namespace {

// Mask with a fixed checker-ish layout: ~70% conditioning, at least one
// target and one conditioning cell.
Matrix demo_mask(int L, int K, Rng& rng) {
  Matrix m(L, K);
  for (auto& e : m.v) e = rng.uniform() < 0.7 ? 1.0 : 0.0;
  m.v.front() = 1.0;
  m.v.back() = 0.0;
  return m;
}

Matrix random_values(int L, int K, Rng& rng) {
  Matrix x(L, K);
  for (auto& e : x.v) e = rng.normal();
  return x;
}

}  // namespace

TEST(ReverseChainTest, SingleStepInversionOracle) {
  // X1 built with a known noise draw; a denoiser that returns exactly that
  // noise must invert the forward step to machine precision at T=1.
  DiffusionSchedule sched = build_schedule(1, 0.25, 0.25, ScheduleKind::linear);
  Rng rng(1);
  const int L = 6, K = 4;
  Matrix truth = random_values(L, K, rng);
  Matrix mask = demo_mask(L, K, rng);
  Matrix inv_mask(L, K);
  for (size_t i = 0; i < mask.v.size(); ++i) inv_mask.v[i] = 1.0 - mask.v[i];

  Matrix x0_ta = apply_mask(truth, inv_mask);
  Matrix x0_co = apply_mask(truth, mask);
  Matrix eps_true(L, K);
  for (size_t i = 0; i < eps_true.v.size(); ++i)
    if (mask.v[i] == 0.0) eps_true.v[i] = rng.normal();
  Matrix x1 = forward_noise(x0_ta, 1, eps_true, sched);

  DenoiseFn stub = [&](const Matrix&, const Matrix&, const Matrix&, int) { return eps_true; };
  Rng chain_rng(2);
  Matrix rec = reverse_chain(x1, x0_co, mask, stub, sched, chain_rng);
  for (size_t i = 0; i < rec.v.size(); ++i) {
    if (mask.v[i] == 0.0)
      EXPECT_NEAR(rec.v[i], truth.v[i], 1e-10);
    else
      EXPECT_EQ(rec.v[i], 0.0);
  }
}

TEST(SampleOneTest, RecoversTruthWithExactNoiseStub) {
  // The stub computes, from the state it is handed, the noise that links it
  // to the ground truth; one reverse step must then land on the truth.
  DiffusionSchedule sched = build_schedule(1, 0.4, 0.4, ScheduleKind::quadratic);
  const double ab = sched.alpha_bar_at(1);
  Rng rng(3);
  const int L = 5, K = 3;
  Matrix truth = random_values(L, K, rng);
  Matrix mask = demo_mask(L, K, rng);
  Matrix inv_mask(L, K);
  for (size_t i = 0; i < mask.v.size(); ++i) inv_mask.v[i] = 1.0 - mask.v[i];
  Matrix x0_ta = apply_mask(truth, inv_mask);
  Matrix x0_co = apply_mask(truth, mask);

  DenoiseFn stub = [&](const Matrix& xt, const Matrix&, const Matrix&, int) {
    Matrix eps(xt.rows, xt.cols);
    for (size_t i = 0; i < eps.v.size(); ++i)
      eps.v[i] = (xt.v[i] - std::sqrt(ab) * x0_ta.v[i]) / std::sqrt(1.0 - ab);
    return eps;
  };
  Rng chain_rng(4);
  Matrix out = sample_one(x0_co, mask, stub, sched, chain_rng);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < K; ++j) {
      if (mask(i, j) == 0.0)
        EXPECT_NEAR(out(i, j), truth(i, j), 1e-10);
      else
        EXPECT_EQ(std::bit_cast<uint64_t>(out(i, j)), std::bit_cast<uint64_t>(truth(i, j)));
    }
}

TEST(SampleOneTest, ObservedImmutableBitExact) {
  DiffusionSchedule sched = default_schedule(10);
  Rng rng(5);
  const int L = 8, K = 5;
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };
  for (int rep = 0; rep < 20; ++rep) {
    Matrix truth = random_values(L, K, rng);
    // Awkward observed values: negative zero and denormals survive the merge.
    truth.v[0] = -0.0;
    truth.v[1] = 5e-324;
    Matrix mask = demo_mask(L, K, rng);
    mask.v[0] = 1.0;
    mask.v[1] = 1.0;
    Matrix x0_co = apply_mask(truth, mask);
    Rng chain_rng(100 + uint64_t(rep));
    Matrix out = sample_one(x0_co, mask, stub, sched, chain_rng);
    for (size_t i = 0; i < mask.v.size(); ++i)
      if (mask.v[i] == 1.0)
        EXPECT_EQ(std::bit_cast<uint64_t>(out.v[i]), std::bit_cast<uint64_t>(x0_co.v[i]));
  }
}

TEST(SampleOneTest, DeterministicPerSeed) {
  DiffusionSchedule sched = default_schedule(6);
  Rng rng(6);
  const int L = 4, K = 3;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) {
    Matrix e(xt.rows, xt.cols);
    for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = 0.1 * xt.v[i];
    return e;
  };
  Rng a(7), b(7);
  Matrix s1 = sample_one(x0_co, mask, stub, sched, a);
  Matrix s2 = sample_one(x0_co, mask, stub, sched, b);
  for (size_t i = 0; i < s1.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(s1.v[i]), std::bit_cast<uint64_t>(s2.v[i]));
}

TEST(SampleOneTest, ConditioningInputValidation) {
  DiffusionSchedule sched = default_schedule(3);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };
  Rng rng(8);
  Matrix mask(2, 2);
  mask(0, 0) = 1.0;
  Matrix bad(2, 2);
  bad(1, 1) = 0.5;  // value outside the mask
  EXPECT_THROW(sample_one(bad, mask, stub, sched, rng), DataError);
  Matrix nonbinary(2, 2, 0.5);
  EXPECT_THROW(sample_one(Matrix(2, 2), nonbinary, stub, sched, rng), DataError);
  Matrix wrong(3, 2);
  EXPECT_THROW(sample_one(wrong, mask, stub, sched, rng), DimError);
}

TEST(SampleOneTest, TargetTaintNeverLeaks) {
  // Ground truth poisoned at non-conditioning cells before the conditioning
  // input is built; a NaN anywhere downstream would prove the sampler read
  // ground truth at target cells.
  DiffusionSchedule sched = default_schedule(5);
  Rng rng(9);
  const int L = 6, K = 4;
  Matrix truth = random_values(L, K, rng);
  Matrix mask = demo_mask(L, K, rng);
  for (size_t i = 0; i < mask.v.size(); ++i)
    if (mask.v[i] == 0.0) truth.v[i] = std::numeric_limits<double>::quiet_NaN();
  Matrix x0_co = apply_mask(truth, mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix& co, const Matrix&, int) {
    Matrix e(xt.rows, xt.cols);
    for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = 0.05 * (xt.v[i] + co.v[i]);
    return e;
  };
  Rng chain_rng(10);
  Matrix out = sample_one(x0_co, mask, stub, sched, chain_rng);
  for (double e : out.v) EXPECT_TRUE(std::isfinite(e));
}

TEST(ImputeTest, SingleSampleIsThePoint) {
  DiffusionSchedule sched = default_schedule(4);
  Rng rng(11);
  const int L = 4, K = 4;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };
  ImputationResult res = impute(x0_co, mask, stub, sched, 1, Rng(12));
  ASSERT_EQ(res.samples.size(), 1u);
  for (size_t i = 0; i < res.point.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(res.point.v[i]), std::bit_cast<uint64_t>(res.samples[0].v[i]));
  for (double e : res.spread.v) EXPECT_EQ(e, 0.0);  // undefined spread reported as zero
  EXPECT_THROW(impute(x0_co, mask, stub, sched, 0, Rng(12)), ArgError);
}

TEST(ImputeTest, ChainsMatchTheirForkedStreams) {
  DiffusionSchedule sched = default_schedule(4);
  Rng rng(13);
  const int L = 3, K = 3;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) {
    Matrix e(xt.rows, xt.cols);
    for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = 0.2 * xt.v[i];
    return e;
  };
  const Rng base(14);
  ImputationResult res = impute(x0_co, mask, stub, sched, 5, base);
  for (int i = 0; i < 5; ++i) {
    Rng chain = base.fork(uint64_t(i));
    Matrix direct = sample_one(x0_co, mask, stub, sched, chain);
    for (size_t k = 0; k < direct.v.size(); ++k)
      EXPECT_EQ(std::bit_cast<uint64_t>(res.samples[size_t(i)].v[k]), std::bit_cast<uint64_t>(direct.v[k]));
  }
}

TEST(ImputeTest, WorkerCountNeverChangesResults) {
  DiffusionSchedule sched = default_schedule(6);
  Rng rng(15);
  const int L = 5, K = 4;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix& co, const Matrix&, int t) {
    Matrix e(xt.rows, xt.cols);
    for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = 0.1 * xt.v[i] - 0.05 * co.v[i] + 0.01 * t;
    return e;
  };
  ImputationResult a = impute(x0_co, mask, stub, sched, 7, Rng(16), false, 1);
  ImputationResult b = impute(x0_co, mask, stub, sched, 7, Rng(16), false, 3);
  for (size_t s = 0; s < a.samples.size(); ++s)
    for (size_t i = 0; i < a.samples[s].v.size(); ++i)
      EXPECT_EQ(std::bit_cast<uint64_t>(a.samples[s].v[i]), std::bit_cast<uint64_t>(b.samples[s].v[i]));
  for (size_t i = 0; i < a.point.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(a.point.v[i]), std::bit_cast<uint64_t>(b.point.v[i]));
}

TEST(ImputeTest, SpreadMatchesSampleStd) {
  DiffusionSchedule sched = default_schedule(3);
  Rng rng(17);
  const int L = 4, K = 2;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };
  const int S = 6;
  ImputationResult res = impute(x0_co, mask, stub, sched, S, Rng(18));
  for (size_t i = 0; i < mask.v.size(); ++i) {
    if (mask.v[i] == 1.0) {
      EXPECT_EQ(res.spread.v[i], 0.0);
      continue;
    }
    double m = 0.0;
    for (const auto& s : res.samples) m += s.v[i];
    m /= S;
    double ss = 0.0;
    for (const auto& s : res.samples) ss += (s.v[i] - m) * (s.v[i] - m);
    EXPECT_NEAR(res.spread.v[i], std::sqrt(ss / (S - 1)), 1e-12);
    EXPECT_NEAR(res.point.v[i], m, 1e-12);
  }
}

TEST(ImputeTest, MedianPoint) {
  DiffusionSchedule sched = default_schedule(3);
  Rng rng(19);
  const int L = 3, K = 2;
  Matrix mask = demo_mask(L, K, rng);
  Matrix x0_co = apply_mask(random_values(L, K, rng), mask);
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };
  ImputationResult res = impute(x0_co, mask, stub, sched, 5, Rng(20), true);
  for (size_t i = 0; i < mask.v.size(); ++i) {
    if (mask.v[i] == 1.0) continue;
    std::vector<double> cell;
    for (const auto& s : res.samples) cell.push_back(s.v[i]);
    std::sort(cell.begin(), cell.end());
    EXPECT_DOUBLE_EQ(res.point.v[i], cell[2]);
  }
}

TEST(ImputeTest, PointSpreadShrinksAsRootS) {
  // With a zero-noise stub each chain's output is an independent draw from a
  // fixed distribution, so the point estimate's variance must scale as 1/S.
  DiffusionSchedule sched = default_schedule(5);
  const int L = 2, K = 2;
  Matrix mask(L, K);
  mask(0, 0) = 1.0;  // three target cells
  Matrix x0_co(L, K);
  x0_co(0, 0) = 0.7;
  DenoiseFn stub = [](const Matrix& xt, const Matrix&, const Matrix&, int) { return Matrix(xt.rows, xt.cols); };

  auto point_variance = [&](int S) {
    const int reps = 300;
    std::vector<double> obs;
    for (int r = 0; r < reps; ++r) {
      ImputationResult res = impute(x0_co, mask, stub, sched, S, Rng(5000 + uint64_t(r) * 13 + uint64_t(S)));
      for (size_t i = 0; i < mask.v.size(); ++i)
        if (mask.v[i] == 0.0) obs.push_back(res.point.v[i]);
    }
    double m = 0.0;
    for (double e : obs) m += e;
    m /= double(obs.size());
    double ss = 0.0;
    for (double e : obs) ss += (e - m) * (e - m);
    return ss / double(obs.size() - 1);
  };

  const double v4 = point_variance(4);
  const double v16 = point_variance(16);
  const double ratio = v4 / v16;
  EXPECT_GT(ratio, 2.8);
  EXPECT_LT(ratio, 5.6);
}

TEST(ModelAdapterTest, MatchesDenoiseValues) {
  ModelConfig c;
  c.L = 6;
  c.K = 3;
  c.n_fde = 1;
  c.n_gta = 1;
  c.d_model = 4;
  c.heads = 2;
  c.d_emb = 4;
  c.T = 3;
  Rng rng(21);
  Denoiser model(c, rng);
  Rng pr(22);
  for (auto& [n, t] : model.params().entries)
    for (double& e : t.mutable_value().v) e = pr.normal() * 0.1;

  Matrix mask(c.L, c.K);
  for (size_t i = 0; i < mask.v.size(); ++i) mask.v[i] = i % 3 != 0 ? 1.0 : 0.0;
  Rng ir(23);
  Matrix xt(c.L, c.K), x0(c.L, c.K);
  for (size_t i = 0; i < mask.v.size(); ++i)
    if (mask.v[i] == 1.0)
      x0.v[i] = ir.normal();
    else
      xt.v[i] = ir.normal();

  DenoiseFn fn = model_denoise_fn(model);
  Matrix got = fn(xt, x0, mask, 2);
  Matrix want = model.denoise(xt, x0, mask, 2).eps_theta.value();
  for (size_t i = 0; i < got.v.size(); ++i)
    EXPECT_EQ(std::bit_cast<uint64_t>(got.v[i]), std::bit_cast<uint64_t>(want.v[i]));
}
