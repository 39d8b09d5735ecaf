#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "sadi/errors.hpp"
#include "sadi/matrix.hpp"

namespace sadi {

enum class ScheduleKind { linear, quadratic };

inline std::string schedule_kind_name(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "quadratic";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "quadratic") return ScheduleKind::quadratic;
  throw ConfigError("schedule kind must be 'linear' or 'quadratic', got '" + s + "'");
}

// Noise-level tables over T steps. Index [t-1] holds step t; alpha_bar_at(0)
// is defined as 1 so the posterior variance vanishes at the final reverse step.
struct DiffusionSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::quadratic;
  double beta_min = 0.0, beta_max = 0.0;
  std::vector<double> beta, alpha, alpha_bar;

  double beta_at(int t) const {
    check_t(t);
    return beta[size_t(t) - 1];
  }
  double alpha_at(int t) const {
    check_t(t);
    return alpha[size_t(t) - 1];
  }
  double alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    check_t(t);
    return alpha_bar[size_t(t) - 1];
  }

  void check_t(int t) const {
    if (t < 1 || t > T)
      throw ArgError("diffusion step t=" + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

inline DiffusionSchedule build_schedule(int T, double beta_min, double beta_max, ScheduleKind kind) {
  if (T < 1) throw ConfigError("build_schedule: T must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ConfigError("build_schedule: need 0 < beta_min <= beta_max < 1");
  DiffusionSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(size_t(T));
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
    double b;
    if (kind == ScheduleKind::linear) {
      b = beta_min + frac * (beta_max - beta_min);
    } else {
      const double r = std::sqrt(beta_min) + frac * (std::sqrt(beta_max) - std::sqrt(beta_min));
      b = r * r;
    }
    s.beta[size_t(t) - 1] = b;
    s.alpha[size_t(t) - 1] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[size_t(t) - 1] = prod;
  }
  return s;
}

inline DiffusionSchedule default_schedule(int T = 50) {
  return build_schedule(T, 1e-4, 0.5, ScheduleKind::quadratic);
}

// X_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
inline Matrix forward_noise(const Matrix& x0, int t, const Matrix& eps, const DiffusionSchedule& sched) {
  sched.check_t(t);
  check_same_shape(x0, eps, "forward_noise");
  const double ab = sched.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Matrix out = x0;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * out.v[i] + b * eps.v[i];
  return out;
}

// mu = (xt - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
inline Matrix reverse_mean(const Matrix& xt_ta, const Matrix& eps_hat, int t, const DiffusionSchedule& sched) {
  sched.check_t(t);
  check_same_shape(xt_ta, eps_hat, "reverse_mean");
  const double ab = sched.alpha_bar_at(t);
  if (ab >= 1.0) throw NumericError("reverse_mean: alpha_bar at t=" + std::to_string(t) + " is 1");
  const double coef = sched.beta_at(t) / std::sqrt(1.0 - ab);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(t));
  Matrix out = xt_ta;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = inv_sqrt_alpha * (out.v[i] - coef * eps_hat.v[i]);
  return out;
}

// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t; zero at t=1.
inline double reverse_variance(int t, const DiffusionSchedule& sched) {
  sched.check_t(t);
  const double num = 1.0 - sched.alpha_bar_at(t - 1);
  if (num == 0.0) return 0.0;
  return num / (1.0 - sched.alpha_bar_at(t)) * sched.beta_at(t);
}

inline nlohmann::json schedule_to_json(const DiffusionSchedule& s) {
  return {{"T", s.T},
          {"kind", schedule_kind_name(s.kind)},
          {"beta_min", s.beta_min},
          {"beta_max", s.beta_max}};
}

inline DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  if (!j.contains("T") || !j.contains("kind") || !j.contains("beta_min") || !j.contains("beta_max"))
    throw DataError("schedule_from_json: missing fields");
  return build_schedule(j.at("T").get<int>(), j.at("beta_min").get<double>(), j.at("beta_max").get<double>(),
                        parse_schedule_kind(j.at("kind").get<std::string>()));
}

}  // namespace sadi
