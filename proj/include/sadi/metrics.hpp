#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "sadi/masking.hpp"
#include "sadi/sampler.hpp"

namespace sadi {

inline double masked_mse(const Matrix& pred, const Matrix& truth, const Matrix& target) {
  check_same_shape(pred, truth, "masked_mse");
  check_same_shape(pred, target, "masked_mse");
  if (!is_binary(target)) throw ArgError("masked_mse: target mask must be 0/1");
  double sq = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < pred.v.size(); ++i)
    if (target.v[i] == 1.0) {
      const double d = pred.v[i] - truth.v[i];
      sq += d * d;
      ++n;
    }
  if (n == 0) throw ArgError("masked_mse: empty target mask");
  return sq / double(n);
}

// Squared error pooled across windows: one mean over all target cells rather
// than a mean of per-window means, so windows with more targets weigh more.
struct PooledMse {
  double sq = 0.0;
  size_t n = 0;

  void add(const Matrix& pred, const Matrix& truth, const Matrix& target) {
    check_same_shape(pred, truth, "PooledMse");
    check_same_shape(pred, target, "PooledMse");
    for (size_t i = 0; i < pred.v.size(); ++i)
      if (target.v[i] == 1.0) {
        const double d = pred.v[i] - truth.v[i];
        sq += d * d;
        ++n;
      }
  }

  double mean() const {
    if (n == 0) throw ArgError("PooledMse: no target cells accumulated");
    return sq / double(n);
  }
};

// Closed form of the integrated squared difference between the empirical CDF
// and the step at y: mean |x_i - y| minus half the mean pairwise distance.
inline double crps_ensemble(const std::vector<double>& samples, double y) {
  const size_t S = samples.size();
  if (S == 0) throw ArgError("crps_ensemble: empty ensemble");
  if (!std::isfinite(y)) throw ArgError("crps_ensemble: non-finite observation");
  for (double x : samples)
    if (!std::isfinite(x)) throw ArgError("crps_ensemble: non-finite sample");
  double t1 = 0.0;
  for (double x : samples) t1 += std::abs(x - y);
  double t2 = 0.0;
  for (double a : samples)
    for (double b : samples) t2 += std::abs(a - b);
  return t1 / double(S) - t2 / (2.0 * double(S) * double(S));
}

// Quadrature oracle for crps_ensemble: trapezoid over a uniform grid spanning
// [min - 3*range, max + 3*range]. The integrand is a step function, so the
// grid is augmented with a point just left of every jump; between consecutive
// nodes the integrand is then constant and the trapezoid rule is exact up to
// the vanishing bracket widths.
inline double crps_quadrature(const std::vector<double>& samples, double y, int grid_points = 100000) {
  const size_t S = samples.size();
  if (S == 0) throw ArgError("crps_quadrature: empty ensemble");
  if (grid_points < 2) throw ArgError("crps_quadrature: need at least 2 grid points");

  std::vector<double> jumps(samples);
  jumps.push_back(y);
  std::sort(jumps.begin(), jumps.end());
  const double lo_s = jumps.front(), hi_s = jumps.back();
  const double range = hi_s - lo_s;
  if (range == 0.0) return 0.0;  // point mass exactly at y

  const double lo = lo_s - 3.0 * range, hi = hi_s + 3.0 * range;
  std::vector<double> grid;
  grid.reserve(size_t(grid_points) + 2 * jumps.size());
  for (int i = 0; i < grid_points; ++i) grid.push_back(lo + (hi - lo) * double(i) / double(grid_points - 1));
  const double delta = range * 1e-12;
  for (double p : jumps) {
    grid.push_back(p - delta);
    grid.push_back(p);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  auto integrand = [&](double x) {
    const double f = double(std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin()) / double(S);
    const double h = x >= y ? 1.0 : 0.0;
    return (f - h) * (f - h);
  };

  double acc = 0.0;
  double prev_x = grid[0], prev_f = integrand(prev_x);
  for (size_t i = 1; i < grid.size(); ++i) {
    const double x = grid[i], f = integrand(x);
    acc += 0.5 * (prev_f + f) * (x - prev_x);
    prev_x = x;
    prev_f = f;
  }
  return acc;
}

// Mean CRPS over target cells, each scored against its ensemble column.
inline double crps_masked(const std::vector<Matrix>& samples, const Matrix& truth, const Matrix& target) {
  if (samples.empty()) throw ArgError("crps_masked: empty ensemble");
  check_same_shape(truth, target, "crps_masked");
  for (const Matrix& s : samples) check_same_shape(s, truth, "crps_masked");
  if (!is_binary(target)) throw ArgError("crps_masked: target mask must be 0/1");

  std::vector<double> cell(samples.size());
  double acc = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < truth.v.size(); ++i) {
    if (target.v[i] != 1.0) continue;
    for (size_t s = 0; s < samples.size(); ++s) cell[s] = samples[s].v[i];
    acc += crps_ensemble(cell, truth.v[i]);
    ++n;
  }
  if (n == 0) throw ArgError("crps_masked: empty target mask");
  return acc / double(n);
}

struct EvalReport {
  std::vector<double> mse;   // one entry per trial
  std::vector<double> crps;  // one entry per trial
  std::vector<uint64_t> trial_seeds;
  PatternSpec pattern;
  int s_samples = 0;
  double mse_mean = 0.0, mse_ci = 0.0;
  double crps_mean = 0.0, crps_ci = 0.0;
  bool has_ci = false;  // needs at least two trials
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ArgError("mean_of: empty");
  double s = 0.0;
  for (double e : v) s += e;
  return s / double(v.size());
}

// 95% half-width from the sample standard deviation; defined for >= 2 trials.
inline double ci_half_width(const std::vector<double>& v) {
  if (v.size() < 2) throw ArgError("ci_half_width: need at least 2 trials");
  const double m = mean_of(v);
  double ss = 0.0;
  for (double e : v) ss += (e - m) * (e - m);
  return 1.96 * std::sqrt(ss / double(v.size() - 1)) / std::sqrt(double(v.size()));
}

inline void finalize_report(EvalReport& r) {
  r.mse_mean = mean_of(r.mse);
  r.crps_mean = mean_of(r.crps);
  r.has_ci = r.mse.size() >= 2;
  if (r.has_ci) {
    r.mse_ci = ci_half_width(r.mse);
    r.crps_ci = ci_half_width(r.crps);
  }
}

// Full evaluation protocol: per trial, draw a fresh blackout pattern over the
// test windows, impute, and score MSE on the point estimate and CRPS on the
// ensemble, pooling cells across windows.
inline EvalReport evaluate(const Denoiser& model, const TimeSeriesBatch& test, const PatternSpec& pattern,
                           int n_trials, int S, uint64_t base_seed, int workers = 1) {
  if (n_trials < 1) throw ArgError("evaluate: need n_trials >= 1");
  if (test.size() == 0) throw ArgError("evaluate: empty test set");
  check_batch(test);

  DenoiseFn fn = model_denoise_fn(model);
  const Rng base(base_seed);
  EvalReport rep;
  rep.pattern = pattern;
  rep.s_samples = S;

  for (int trial = 0; trial < n_trials; ++trial) {
    Rng trial_rng = base.fork(uint64_t(trial));
    rep.trial_seeds.push_back(trial_rng.seed());
    PooledMse mse;
    double crps_acc = 0.0;
    size_t crps_n = 0;
    for (size_t w = 0; w < test.size(); ++w) {
      Rng mask_rng = trial_rng.fork(2 * w);
      MaskPair mp = pb_eval_pattern(test.observed[w], pattern, mask_rng);
      Matrix x0_co = apply_mask(test.values[w], mp.cond);
      ImputationResult res =
          impute(x0_co, mp.cond, fn, model.schedule(), S, trial_rng.fork(2 * w + 1), false, workers);
      mse.add(res.point, test.values[w], mp.target);
      std::vector<double> cell(static_cast<size_t>(S));
      for (size_t i = 0; i < mp.target.v.size(); ++i) {
        if (mp.target.v[i] != 1.0) continue;
        for (int s = 0; s < S; ++s) cell[size_t(s)] = res.samples[size_t(s)].v[i];
        crps_acc += crps_ensemble(cell, test.values[w].v[i]);
        ++crps_n;
      }
    }
    rep.mse.push_back(mse.mean());
    if (crps_n == 0) throw DataError("evaluate: trial produced no target cells");
    rep.crps.push_back(crps_acc / double(crps_n));
  }
  finalize_report(rep);
  return rep;
}

// Per-feature observed-mean baseline: every target cell gets the mean of the
// conditioning cells of its feature (0 when a feature has none, matching the
// normalized-scale convention).
inline Matrix mean_impute_baseline(const Matrix& x0_co, const Matrix& mask_co) {
  check_same_shape(x0_co, mask_co, "mean_impute_baseline");
  const int L = x0_co.rows, K = x0_co.cols;
  std::vector<double> sum(size_t(K), 0.0);
  std::vector<int> cnt(size_t(K), 0);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < K; ++j)
      if (mask_co(i, j) == 1.0) {
        sum[size_t(j)] += x0_co(i, j);
        ++cnt[size_t(j)];
      }
  Matrix fill(L, K);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < K; ++j) fill(i, j) = cnt[size_t(j)] > 0 ? sum[size_t(j)] / double(cnt[size_t(j)]) : 0.0;
  return merge_imputation(x0_co, fill, mask_co);
}

// Linear interpolation baseline: per feature, interpolate between the nearest
// conditioning cells in time; extrapolate flat at the edges; features with no
// conditioning cells fall back to 0.
inline Matrix linear_interp_baseline(const Matrix& x0_co, const Matrix& mask_co) {
  check_same_shape(x0_co, mask_co, "linear_interp_baseline");
  const int L = x0_co.rows, K = x0_co.cols;
  Matrix fill(L, K);
  for (int j = 0; j < K; ++j) {
    std::vector<int> obs;
    for (int i = 0; i < L; ++i)
      if (mask_co(i, j) == 1.0) obs.push_back(i);
    for (int i = 0; i < L; ++i) {
      if (obs.empty()) {
        fill(i, j) = 0.0;
        continue;
      }
      auto it = std::lower_bound(obs.begin(), obs.end(), i);
      if (it == obs.begin()) {
        fill(i, j) = x0_co(obs.front(), j);
      } else if (it == obs.end()) {
        fill(i, j) = x0_co(obs.back(), j);
      } else {
        const int hi = *it, lo = *(it - 1);
        const double f = double(i - lo) / double(hi - lo);
        fill(i, j) = (1.0 - f) * x0_co(lo, j) + f * x0_co(hi, j);
      }
    }
  }
  return merge_imputation(x0_co, fill, mask_co);
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j{{"trials", r.mse.size()},
                   {"s_samples", r.s_samples},
                   {"pattern", {{"n_features", r.pattern.n_features}, {"n_blocks", r.pattern.n_blocks}, {"block_len", r.pattern.block_len}}},
                   {"trial_seeds", r.trial_seeds},
                   {"mse", r.mse},
                   {"crps", r.crps},
                   {"mse_mean", r.mse_mean},
                   {"crps_mean", r.crps_mean}};
  if (r.has_ci) {
    j["mse_ci95"] = r.mse_ci;
    j["crps_ci95"] = r.crps_ci;
  }
  return j;
}

}  // namespace sadi
