#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <thread>
#include <vector>

#include "sadi/denoiser.hpp"
#include "sadi/diffusion.hpp"
#include "sadi/masking.hpp"

namespace sadi {

// Noise predictor for one window at one diffusion step. Chains only need
// values; the model adapter below runs tape-free.
using DenoiseFn = std::function<Matrix(const Matrix& xt_ta, const Matrix& x0_co, const Matrix& mask_co, int t)>;

// Captures the model by reference; the model must outlive the returned
// function.
inline DenoiseFn model_denoise_fn(const Denoiser& model) {
  return [&model](const Matrix& xt_ta, const Matrix& x0_co, const Matrix& mask_co, int t) {
    nn::NoGradGuard ng;
    return model.denoise(xt_ta, x0_co, mask_co, t).eps_theta.value();
  };
}

struct ImputationResult {
  std::vector<Matrix> samples;  // each merged: observed kept, targets filled
  Matrix point;                 // ensemble mean (or median), merged
  Matrix spread;                // per-cell sample std, zero at observed cells
};

namespace detail {

inline void check_conditioning(const Matrix& x0_co, const Matrix& mask_co, const char* who) {
  check_same_shape(x0_co, mask_co, who);
  if (!is_binary(mask_co)) throw DataError(std::string(who) + ": mask must be 0/1");
  for (size_t i = 0; i < mask_co.v.size(); ++i)
    if (mask_co.v[i] == 0.0 && x0_co.v[i] != 0.0)
      throw DataError(std::string(who) + ": conditioning input must be zero-filled outside the mask");
}

}  // namespace detail

// Reverse diffusion from a given noisy target state at step T down to the
// clean estimate. The iterate lives on non-conditioning cells; conditioning
// cells stay zero throughout and are merged back by the callers.
inline Matrix reverse_chain(Matrix x_curr, const Matrix& x0_co, const Matrix& mask_co, const DenoiseFn& fn,
                            const DiffusionSchedule& sched, Rng& rng) {
  detail::check_conditioning(x0_co, mask_co, "reverse_chain");
  check_same_shape(x_curr, mask_co, "reverse_chain");
  for (int t = sched.T; t >= 1; --t) {
    Matrix eps = fn(x_curr, x0_co, mask_co, t);
    Matrix mu = reverse_mean(x_curr, eps, t, sched);
    const double sigma = reverse_variance(t, sched);
    const double sd = std::sqrt(sigma);
    for (size_t i = 0; i < x_curr.v.size(); ++i) {
      if (mask_co.v[i] == 1.0) {
        x_curr.v[i] = 0.0;
        continue;
      }
      // sigma reaches exactly 0 at t=1; no draw is consumed there.
      x_curr.v[i] = sigma > 0.0 ? mu.v[i] + sd * rng.normal() : mu.v[i];
    }
  }
  return x_curr;
}

// One imputation draw: pure-noise initialization of every non-conditioning
// cell, full reverse chain, then the merge that keeps observed values
// bit-exact.
inline Matrix sample_one(const Matrix& x0_co, const Matrix& mask_co, const DenoiseFn& fn,
                         const DiffusionSchedule& sched, Rng& rng) {
  detail::check_conditioning(x0_co, mask_co, "sample_one");
  Matrix x_t(x0_co.rows, x0_co.cols);
  for (size_t i = 0; i < x_t.v.size(); ++i)
    if (mask_co.v[i] == 0.0) x_t.v[i] = rng.normal();
  Matrix gen = reverse_chain(std::move(x_t), x0_co, mask_co, fn, sched, rng);
  return merge_imputation(x0_co, gen, mask_co);
}

// S independent chains; chain i draws from base.fork(i), so the sample set
// is a function of the base seed alone and chains may run on any worker.
inline ImputationResult impute(const Matrix& x0_co, const Matrix& mask_co, const DenoiseFn& fn,
                               const DiffusionSchedule& sched, int S, const Rng& base, bool use_median = false,
                               int workers = 1) {
  if (S < 1) throw ArgError("impute: need S >= 1 samples");
  detail::check_conditioning(x0_co, mask_co, "impute");

  ImputationResult res;
  res.samples.assign(size_t(S), Matrix());
  auto run_chain = [&](int i) {
    Rng rng = base.fork(uint64_t(i));
    res.samples[size_t(i)] = sample_one(x0_co, mask_co, fn, sched, rng);
  };
  if (workers <= 1 || S == 1) {
    for (int i = 0; i < S; ++i) run_chain(i);
  } else {
    const int n = std::min(workers, S);
    std::vector<std::thread> pool;
    pool.reserve(size_t(n));
    for (int w = 0; w < n; ++w)
      pool.emplace_back([&, w] {
        for (int i = w; i < S; i += n) run_chain(i);
      });
    for (auto& th : pool) th.join();
  }

  const int L = x0_co.rows, K = x0_co.cols;
  Matrix center(L, K), spread(L, K);
  std::vector<double> cell(static_cast<size_t>(S));
  for (size_t i = 0; i < center.v.size(); ++i) {
    for (int s = 0; s < S; ++s) cell[size_t(s)] = res.samples[size_t(s)].v[i];
    if (use_median) {
      std::sort(cell.begin(), cell.end());
      center.v[i] = S % 2 ? cell[size_t(S / 2)] : 0.5 * (cell[size_t(S / 2) - 1] + cell[size_t(S / 2)]);
    } else {
      double sum = 0.0;
      for (double e : cell) sum += e;
      center.v[i] = sum / double(S);
    }
    if (mask_co.v[i] == 0.0 && S >= 2) {
      double mean = 0.0;
      for (double e : cell) mean += e;
      mean /= double(S);
      double ss = 0.0;
      for (double e : cell) ss += (e - mean) * (e - mean);
      spread.v[i] = std::sqrt(ss / double(S - 1));
    }
  }
  res.point = merge_imputation(x0_co, center, mask_co);
  res.spread = std::move(spread);
  return res;
}

}  // namespace sadi
