#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sadi/errors.hpp"
#include "sadi/masking.hpp"
#include "sadi/matrix.hpp"
#include "sadi/rng.hpp"
#include "sadi/util.hpp"

namespace sadi {

// Per-feature z-score statistics, computed over observed training cells only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  int features() const { return int(mean.size()); }
  bool empty() const { return mean.empty(); }
};

inline nlohmann::json stats_to_json(const NormStats& s) {
  return nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}};
}

inline NormStats stats_from_json(const nlohmann::json& j) {
  NormStats s;
  try {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.stddev = j.at("stddev").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("norm stats: ") + e.what());
  }
  if (s.mean.size() != s.stddev.size()) throw DataError("norm stats: mean/stddev length mismatch");
  return s;
}

// A set of equal-width windows plus bookkeeping. `stats` is empty until the
// dataset has been normalized (or had training stats applied to it).
struct Dataset {
  TimeSeriesBatch series;
  std::vector<std::string> feature_names;
  NormStats stats;

  size_t windows() const { return series.size(); }
  int features() const { return int(feature_names.size()); }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> cells;
  size_t start = 0;
  while (true) {
    size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      return cells;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

}  // namespace detail

// Reads a rectangular CSV: header row of feature names, one row per time
// step, empty cell = missing (zero-filled, mask 0). Lines starting with '#'
// are comments (run outputs carry their config hash in one). The result holds
// a single window spanning every data row; cut it with window() once L is
// known. Parse errors cite the 1-based data row and the column name.
inline Dataset load_csv(const std::string& path) {
  const std::string text = read_file(path);

  std::vector<std::string_view> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = detail::trim(std::string_view(text.data() + pos, nl - pos));
    if (!line.empty() && line.front() != '#') lines.push_back(line);
    pos = nl + 1;
  }
  if (lines.empty()) throw DataError("load_csv: " + path + " is empty");

  Dataset ds;
  for (std::string_view name : detail::split_row(lines[0])) ds.feature_names.emplace_back(name);
  const int K = int(ds.feature_names.size());
  const int T = int(lines.size()) - 1;
  if (T < 1) throw DataError("load_csv: " + path + " has a header but no data rows");

  Matrix values(T, K), observed(T, K);
  for (int r = 0; r < T; ++r) {
    std::vector<std::string_view> cells = detail::split_row(lines[size_t(r) + 1]);
    if (int(cells.size()) != K)
      throw DataError("load_csv: " + path + " row " + std::to_string(r + 1) + " has " +
                      std::to_string(cells.size()) + " cells, expected " + std::to_string(K));
    for (int c = 0; c < K; ++c) {
      if (cells[size_t(c)].empty()) continue;
      double x;
      auto [p, ec] = std::from_chars(cells[size_t(c)].begin(), cells[size_t(c)].end(), x);
      if (ec != std::errc() || p != cells[size_t(c)].end() || !std::isfinite(x))
        throw DataError("load_csv: " + path + " row " + std::to_string(r + 1) + ", column " +
                        ds.feature_names[size_t(c)] + ": cannot parse \"" + std::string(cells[size_t(c)]) + "\"");
      values(r, c) = x;
      observed(r, c) = 1.0;
    }
  }
  ds.series.values.push_back(std::move(values));
  ds.series.observed.push_back(std::move(observed));
  return ds;
}

// Writes one window back out in load_csv's format: missing cells are empty,
// present cells use shortest-round-trip decimals, so save/load is lossless.
inline std::string to_csv(const Matrix& values, const Matrix& observed, const std::vector<std::string>& names) {
  check_same_shape(values, observed, "to_csv");
  if (int(names.size()) != values.cols) throw DimError("to_csv: header width does not match data");
  std::string out;
  for (size_t c = 0; c < names.size(); ++c) {
    if (c) out += ',';
    out += names[c];
  }
  out += '\n';
  for (int r = 0; r < values.rows; ++r) {
    for (int c = 0; c < values.cols; ++c) {
      if (c) out += ',';
      if (observed(r, c) == 1.0) out += format_double(values(r, c));
    }
    out += '\n';
  }
  return out;
}

inline void save_csv(const std::string& path, const Matrix& values, const Matrix& observed,
                     const std::vector<std::string>& names) {
  write_file(path, to_csv(values, observed, names));
}

// Cuts every source window into non-overlapping length-L windows, dropping
// each ragged tail. Windows never straddle source-window boundaries, so
// disjointness in source rows is preserved.
inline Dataset window(const Dataset& ds, int L) {
  if (L < 1) throw ArgError("window: L must be positive");
  Dataset out;
  out.feature_names = ds.feature_names;
  out.stats = ds.stats;
  for (size_t w = 0; w < ds.series.size(); ++w) {
    const Matrix& v = ds.series.values[w];
    const Matrix& m = ds.series.observed[w];
    for (int start = 0; start + L <= v.rows; start += L) {
      Matrix wv(L, v.cols), wm(L, v.cols);
      for (int r = 0; r < L; ++r)
        for (int c = 0; c < v.cols; ++c) {
          wv(r, c) = v(start + r, c);
          wm(r, c) = m(start + r, c);
        }
      out.series.values.push_back(std::move(wv));
      out.series.observed.push_back(std::move(wm));
    }
  }
  if (out.series.size() == 0)
    throw DataError("window: no source window has " + std::to_string(L) + " rows");
  return out;
}

// Consecutive disjoint window ranges, train first. Windows are themselves
// disjoint in source rows, so the splits are too.
struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

inline Splits split(const Dataset& ds, int n_train, int n_val, int n_test) {
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ArgError("split: negative split size");
  if (size_t(n_train) + size_t(n_val) + size_t(n_test) > ds.windows())
    throw DataError("split: " + std::to_string(n_train + n_val + n_test) + " windows requested, " +
                    std::to_string(ds.windows()) + " available");
  Splits out;
  auto take = [&](Dataset& d, size_t begin, int n) {
    d.feature_names = ds.feature_names;
    d.stats = ds.stats;
    for (int i = 0; i < n; ++i) {
      d.series.values.push_back(ds.series.values[begin + size_t(i)]);
      d.series.observed.push_back(ds.series.observed[begin + size_t(i)]);
    }
  };
  take(out.train, 0, n_train);
  take(out.val, size_t(n_train), n_val);
  take(out.test, size_t(n_train) + size_t(n_val), n_test);
  return out;
}

// Mean and population std per feature over observed cells. Rejects features
// with no observations or zero spread: they cannot be z-scored.
inline NormStats feature_stats(const TimeSeriesBatch& b) {
  check_batch(b);
  if (b.size() == 0) throw ArgError("feature_stats: empty batch");
  const int K = b.values[0].cols;
  std::vector<double> sum(size_t(K), 0.0), sumsq(size_t(K), 0.0);
  std::vector<int64_t> n(size_t(K), 0);
  for (size_t w = 0; w < b.size(); ++w)
    for (int r = 0; r < b.values[w].rows; ++r)
      for (int c = 0; c < K; ++c)
        if (b.observed[w](r, c) == 1.0) {
          sum[size_t(c)] += b.values[w](r, c);
          sumsq[size_t(c)] += b.values[w](r, c) * b.values[w](r, c);
          ++n[size_t(c)];
        }
  NormStats s;
  s.mean.resize(size_t(K));
  s.stddev.resize(size_t(K));
  for (int c = 0; c < K; ++c) {
    if (n[size_t(c)] == 0) throw DataError("feature_stats: feature " + std::to_string(c) + " has no observed cells");
    const double mu = sum[size_t(c)] / double(n[size_t(c)]);
    const double var = std::max(0.0, sumsq[size_t(c)] / double(n[size_t(c)]) - mu * mu);
    const double sd = std::sqrt(var);
    if (sd <= 0.0) throw DataError("feature_stats: feature " + std::to_string(c) + " is constant");
    s.mean[size_t(c)] = mu;
    s.stddev[size_t(c)] = sd;
  }
  return s;
}

// Z-scores observed cells with the given (training) stats; missing cells stay
// exactly zero. The stats are recorded on the result.
inline Dataset normalize(const Dataset& ds, const NormStats& stats) {
  if (stats.features() != ds.features()) throw DimError("normalize: stats width does not match dataset");
  Dataset out;
  out.feature_names = ds.feature_names;
  out.stats = stats;
  for (size_t w = 0; w < ds.series.size(); ++w) {
    Matrix v(ds.series.values[w].rows, ds.series.values[w].cols);
    for (int r = 0; r < v.rows; ++r)
      for (int c = 0; c < v.cols; ++c)
        if (ds.series.observed[w](r, c) == 1.0)
          v(r, c) = (ds.series.values[w](r, c) - stats.mean[size_t(c)]) / stats.stddev[size_t(c)];
    out.series.values.push_back(std::move(v));
    out.series.observed.push_back(ds.series.observed[w]);
  }
  return out;
}

inline Dataset normalize(const Dataset& ds) { return normalize(ds, feature_stats(ds.series)); }

// Inverse affine map applied to every cell; use on filled imputations where
// nothing is missing any more.
inline Matrix denormalize(const Matrix& x, const NormStats& stats) {
  if (stats.features() != x.cols) throw DimError("denormalize: stats width does not match data");
  Matrix out(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out(r, c) = x(r, c) * stats.stddev[size_t(c)] + stats.mean[size_t(c)];
  return out;
}

// Scale-only inverse for dispersion quantities (a spread has no location).
inline Matrix denormalize_spread(const Matrix& x, const NormStats& stats) {
  if (stats.features() != x.cols) throw DimError("denormalize_spread: stats width does not match data");
  Matrix out(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out(r, c) = x(r, c) * stats.stddev[size_t(c)];
  return out;
}

// Stationary vector autoregression x_t = rho * A x_{t-1} + eta_t used to make
// ground-truth data with a known cross-feature dependency structure.
struct SynthSpec {
  int K = 8;
  int L = 32;
  int count = 500;
  Matrix coupling;  // K x K; identity when left empty
  double rho = 0.9;
  double noise_std = 1.0;
  uint64_t seed = 0;
};

inline nlohmann::json synth_spec_to_json(const SynthSpec& s) {
  std::vector<std::vector<double>> a(size_t(s.coupling.rows));
  for (int r = 0; r < s.coupling.rows; ++r)
    a[size_t(r)].assign(s.coupling.row(r), s.coupling.row(r) + s.coupling.cols);
  return nlohmann::json{{"K", s.K},     {"L", s.L},
                        {"count", s.count}, {"coupling", a},
                        {"rho", s.rho}, {"noise_std", s.noise_std},
                        {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.K = j.at("K").get<int>();
    s.L = j.at("L").get<int>();
    s.count = j.at("count").get<int>();
    s.rho = j.at("rho").get<double>();
    s.noise_std = j.at("noise_std").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    const auto a = j.at("coupling").get<std::vector<std::vector<double>>>();
    if (!a.empty()) {
      s.coupling = Matrix(int(a.size()), int(a[0].size()));
      for (int r = 0; r < s.coupling.rows; ++r) {
        if (int(a[size_t(r)].size()) != s.coupling.cols) throw DataError("synth spec: ragged coupling matrix");
        for (int c = 0; c < s.coupling.cols; ++c) s.coupling(r, c) = a[size_t(r)][size_t(c)];
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("synth spec: ") + e.what());
  }
  return s;
}

namespace detail {

// Infinity norm of (rho*A)^256 via repeated squaring. Under stationarity the
// power norm decays geometrically, so a norm >= 1 this deep marks the spec as
// unstable (or close enough to blow up over a long run).
inline double transition_power_norm(const Matrix& a, double rho) {
  Matrix b(a.rows, a.cols);
  for (size_t i = 0; i < b.v.size(); ++i) b.v[i] = rho * a.v[i];
  for (int step = 0; step < 8; ++step) {
    Matrix sq(b.rows, b.cols);
    matmul_acc(b, b, sq);
    b = std::move(sq);
  }
  double norm = 0.0;
  for (int r = 0; r < b.rows; ++r) {
    double row_sum = 0.0;
    for (int c = 0; c < b.cols; ++c) row_sum += std::abs(b(r, c));
    norm = std::max(norm, row_sum);
  }
  return norm;
}

}  // namespace detail

inline void validate_synth_spec(const SynthSpec& s) {
  if (s.K < 1 || s.L < 1 || s.count < 1) throw ConfigError("synth spec: K, L, count must be positive");
  if (!(s.noise_std > 0.0)) throw ConfigError("synth spec: noise_std must be positive");
  if (!(s.rho > -1.0) || !(s.rho < 1.0)) throw ConfigError("synth spec: rho must be in (-1, 1)");
  Matrix a = s.coupling;
  if (a.rows == 0) {
    a = Matrix(s.K, s.K);
    for (int i = 0; i < s.K; ++i) a(i, i) = 1.0;
  }
  if (a.rows != s.K || a.cols != s.K) throw ConfigError("synth spec: coupling must be K x K");
  if (!a.all_finite()) throw ConfigError("synth spec: coupling must be finite");
  if (detail::transition_power_norm(a, s.rho) >= 1.0)
    throw ConfigError("synth spec: transition rho*A is not stable");
}

// One long chain started from zero, burned in for 100 steps, then cut into
// `count` consecutive fully observed windows. Deterministic per seed.
inline Dataset synth_generate(const SynthSpec& spec) {
  validate_synth_spec(spec);
  Matrix a = spec.coupling;
  if (a.rows == 0) {
    a = Matrix(spec.K, spec.K);
    for (int i = 0; i < spec.K; ++i) a(i, i) = 1.0;
  }
  Rng rng(spec.seed);
  const int burn_in = 100;
  const int64_t total = int64_t(spec.count) * spec.L;

  std::vector<double> x(size_t(spec.K), 0.0), next(size_t(spec.K));
  Dataset ds;
  for (int k = 0; k < spec.K; ++k) ds.feature_names.push_back("f" + std::to_string(k));

  Matrix chain(int(total), spec.K);
  for (int64_t t = 0; t < burn_in + total; ++t) {
    for (int i = 0; i < spec.K; ++i) {
      double acc = 0.0;
      for (int j = 0; j < spec.K; ++j) acc += a(i, j) * x[size_t(j)];
      next[size_t(i)] = spec.rho * acc + spec.noise_std * rng.normal();
    }
    x = next;
    if (t >= burn_in)
      for (int i = 0; i < spec.K; ++i) chain(int(t - burn_in), i) = x[size_t(i)];
  }

  for (int w = 0; w < spec.count; ++w) {
    Matrix v(spec.L, spec.K);
    for (int r = 0; r < spec.L; ++r)
      for (int c = 0; c < spec.K; ++c) v(r, c) = chain(w * spec.L + r, c);
    ds.series.values.push_back(std::move(v));
    ds.series.observed.push_back(Matrix(spec.L, spec.K, 1.0));
  }
  return ds;
}

}  // namespace sadi
