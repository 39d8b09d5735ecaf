#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sadi/errors.hpp"
#include "sadi/matrix.hpp"
#include "sadi/rng.hpp"

namespace sadi {

// A batch of L x K windows with their observation masks (1 = observed).
// Values are zero-filled wherever unobserved.
struct TimeSeriesBatch {
  std::vector<Matrix> values;
  std::vector<Matrix> observed;

  size_t size() const { return values.size(); }
};

inline bool is_binary(const Matrix& m) {
  for (double e : m.v)
    if (e != 0.0 && e != 1.0) return false;
  return true;
}

inline void check_batch(const TimeSeriesBatch& b) {
  if (b.values.size() != b.observed.size()) throw DimError("TimeSeriesBatch: values/observed length mismatch");
  for (size_t i = 0; i < b.values.size(); ++i) {
    check_same_shape(b.values[i], b.observed[i], "TimeSeriesBatch");
    if (!is_binary(b.observed[i])) throw DataError("TimeSeriesBatch: observed mask must be 0/1");
    for (size_t j = 0; j < b.values[i].v.size(); ++j)
      if (b.observed[i].v[j] == 0.0 && b.values[i].v[j] != 0.0)
        throw DataError("TimeSeriesBatch: nonzero value at unobserved cell");
  }
}

// Disjoint conditioning/target masks carved out of one window's observed set.
struct MaskPair {
  Matrix cond;
  Matrix target;
};

// Contiguous missing blocks: one duration, one start per chosen feature.
struct BlockSpec {
  std::vector<int> features;
  std::vector<int> starts;  // starts[i] pairs with features[i]
  int duration = 0;
};

// Keeps values only where mask = 1, zero elsewhere. Selection, not
// multiplication: NaN or -0.0 in a masked-out cell must not leak through.
inline Matrix apply_mask(const Matrix& values, const Matrix& mask) {
  check_same_shape(values, mask, "apply_mask");
  Matrix out(values.rows, values.cols);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = mask.v[i] == 1.0 ? values.v[i] : 0.0;
  return out;
}

// Observed cells pass through from x0_co untouched (bitwise); the rest come
// from the imputation.
inline Matrix merge_imputation(const Matrix& x0_co, const Matrix& x_ta_hat, const Matrix& mask_co) {
  check_same_shape(x0_co, x_ta_hat, "merge_imputation");
  check_same_shape(x0_co, mask_co, "merge_imputation");
  Matrix out(x0_co.rows, x0_co.cols);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = mask_co.v[i] == 1.0 ? x0_co.v[i] : x_ta_hat.v[i];
  return out;
}

namespace detail {

inline std::vector<int> observed_indices(const Matrix& observed) {
  std::vector<int> idx;
  idx.reserve(observed.v.size());
  for (int i = 0; i < int(observed.v.size()); ++i)
    if (observed.v[size_t(i)] == 1.0) idx.push_back(i);
  return idx;
}

// First n elements of a uniform random permutation, via partial Fisher-Yates.
template <typename T>
inline void partial_shuffle(std::vector<T>& v, size_t n, Rng& rng) {
  for (size_t i = 0; i < n && i + 1 < v.size(); ++i) {
    const size_t j = size_t(rng.uniform_int(int64_t(i), int64_t(v.size()) - 1));
    std::swap(v[i], v[j]);
  }
}

}  // namespace detail

// Random-missing split: exactly ceil(fraction * #observed) target cells drawn
// uniformly without replacement from the observed set.
inline MaskPair rm_split(const Matrix& observed, double fraction, Rng& rng) {
  if (!(fraction > 0.0) || !(fraction < 1.0)) throw ArgError("rm_split: fraction must be in (0, 1)");
  if (!is_binary(observed)) throw DataError("rm_split: observed mask must be 0/1");
  std::vector<int> idx = detail::observed_indices(observed);
  if (idx.empty()) throw ArgError("rm_split: no observed cells");
  const size_t n_target = size_t(std::ceil(fraction * double(idx.size())));
  if (n_target == 0) throw ArgError("rm_split: fraction yields zero targets");
  detail::partial_shuffle(idx, n_target, rng);
  MaskPair mp{observed, Matrix(observed.rows, observed.cols)};
  for (size_t i = 0; i < n_target; ++i) {
    mp.cond.v[size_t(idx[i])] = 0.0;
    mp.target.v[size_t(idx[i])] = 1.0;
  }
  return mp;
}

inline Matrix render_blocks(const BlockSpec& spec, int L, int K) {
  Matrix m(L, K);
  if (spec.features.size() != spec.starts.size()) throw DimError("render_blocks: features/starts mismatch");
  for (size_t i = 0; i < spec.features.size(); ++i) {
    const int f = spec.features[i], s = spec.starts[i];
    if (f < 0 || f >= K || s < 0 || s + spec.duration > L) throw ArgError("render_blocks: block outside window");
    for (int t = s; t < s + spec.duration; ++t) m(t, f) = 1.0;
  }
  return m;
}

// Mixed-pattern split: with probability pb_prob carve a partial blackout
// (n_feat ~ U{1..K/2} features, one duration ~ U{1..L/2}, an independent
// uniform start per feature), otherwise fall back to random missing.
// Degenerate pb_prob of exactly 0 or 1 consumes no branch draw, so seeded
// runs coincide with the pure strategies.
inline MaskPair mpb_split(const Matrix& observed, double rm_fraction, double pb_prob, Rng& rng) {
  const int L = observed.rows, K = observed.cols;
  if (K < 2 || L < 2) throw ArgError("mpb_split: need L >= 2 and K >= 2");
  if (!(pb_prob >= 0.0) || !(pb_prob <= 1.0)) throw ArgError("mpb_split: pb_prob must be in [0, 1]");
  if (!is_binary(observed)) throw DataError("mpb_split: observed mask must be 0/1");
  const bool blackout = pb_prob >= 1.0 ? true : (pb_prob <= 0.0 ? false : rng.uniform() < pb_prob);
  if (!blackout) return rm_split(observed, rm_fraction, rng);

  const int max_retries = 100;
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    BlockSpec spec;
    const int n_feat = int(rng.uniform_int(1, K / 2));
    spec.duration = int(rng.uniform_int(1, L / 2));
    std::vector<int> feats(static_cast<size_t>(K));
    for (int f = 0; f < K; ++f) feats[size_t(f)] = f;
    detail::partial_shuffle(feats, size_t(n_feat), rng);
    feats.resize(size_t(n_feat));
    for (int f : feats) {
      spec.features.push_back(f);
      spec.starts.push_back(int(rng.uniform_int(0, L - spec.duration)));
    }
    Matrix blocks = render_blocks(spec, L, K);
    MaskPair mp{observed, Matrix(L, K)};
    size_t hit = 0;
    for (size_t i = 0; i < blocks.v.size(); ++i)
      if (blocks.v[i] == 1.0 && observed.v[i] == 1.0) {
        mp.cond.v[i] = 0.0;
        mp.target.v[i] = 1.0;
        ++hit;
      }
    if (hit > 0) return mp;
  }
  throw DataError("mpb_split: blackout never intersected observed cells");
}

// Evaluation pattern: one uniformly drawn feature subset; n_blocks
// non-overlapping windows of block_len placed uniformly over valid layouts
// (stars-and-bars bijection onto distinct sorted draws).
inline MaskPair pb_eval_pattern(const Matrix& observed, int n_features, int block_len, int n_blocks, Rng& rng) {
  const int L = observed.rows, K = observed.cols;
  if (n_features < 1 || n_features > K) throw ArgError("pb_eval_pattern: n_features must be in [1, K]");
  if (block_len < 1 || n_blocks < 1) throw ArgError("pb_eval_pattern: block_len and n_blocks must be >= 1");
  if (int64_t(n_blocks) * block_len > L)
    throw ArgError("pb_eval_pattern: cannot place " + std::to_string(n_blocks) + " blocks of " +
                   std::to_string(block_len) + " in length " + std::to_string(L));
  if (!is_binary(observed)) throw DataError("pb_eval_pattern: observed mask must be 0/1");

  const int max_retries = 100;
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<int> feats(static_cast<size_t>(K));
    for (int f = 0; f < K; ++f) feats[size_t(f)] = f;
    detail::partial_shuffle(feats, size_t(n_features), rng);
    feats.resize(size_t(n_features));

    // Valid sorted starts t_i (t_{i+1} >= t_i + block_len) biject onto
    // n-multisets of {0..M} via y_i = t_i - i*block_len, and those onto
    // n distinct values of {0..M+n-1} via z_i = y_i + i.
    const int M = L - n_blocks * block_len;
    std::vector<int> z(static_cast<size_t>(M + n_blocks));
    for (int i = 0; i < int(z.size()); ++i) z[size_t(i)] = i;
    detail::partial_shuffle(z, size_t(n_blocks), rng);
    z.resize(size_t(n_blocks));
    std::sort(z.begin(), z.end());
    std::vector<int> starts(static_cast<size_t>(n_blocks));
    for (int i = 0; i < n_blocks; ++i) starts[size_t(i)] = z[size_t(i)] - i + i * block_len;

    MaskPair mp{observed, Matrix(L, K)};
    size_t hit = 0;
    for (int s : starts)
      for (int t = s; t < s + block_len; ++t)
        for (int f : feats) {
          const size_t i = size_t(t) * size_t(K) + size_t(f);
          if (observed.v[i] == 1.0) {
            mp.cond.v[i] = 0.0;
            mp.target.v[i] = 1.0;
            ++hit;
          }
        }
    if (hit > 0) return mp;
  }
  throw DataError("pb_eval_pattern: pattern never intersected observed cells");
}

inline size_t count_ones(const Matrix& m) {
  size_t n = 0;
  for (double e : m.v) n += e == 1.0;
  return n;
}

// Evaluation pattern parameters as one unit; trainer validation, the
// evaluation harness, and the CLI all take the same triple.
struct PatternSpec {
  int n_features = 2;
  int n_blocks = 2;
  int block_len = 4;
};

inline MaskPair pb_eval_pattern(const Matrix& observed, const PatternSpec& p, Rng& rng) {
  return pb_eval_pattern(observed, p.n_features, p.block_len, p.n_blocks, rng);
}

}  // namespace sadi
