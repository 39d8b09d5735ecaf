#pragma once

#include <cmath>
#include <map>
#include <string>

#include "sadi/nn/param_store.hpp"

namespace sadi::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators, keyed like the ParamStore.
struct AdamState {
  AdamConfig cfg;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
};

using GradMap = std::map<std::string, Matrix>;

inline double global_grad_norm(const GradMap& grads) {
  double ss = 0.0;
  for (const auto& [name, g] : grads)
    for (double e : g.v) ss += e * e;
  return std::sqrt(ss);
}

// In-place rescale so the global norm is at most max_norm.
inline void clip_grad_norm(GradMap& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto& [name, g] : grads)
    for (double& e : g.v) e *= s;
}

// One Adam update with bias correction. Every parameter must be covered by a
// gradient of matching shape; callers supply explicit zeros for parameters a
// step did not touch.
inline void adam_step(ParamStore& params, const GradMap& grads, AdamState& st) {
  const int64_t t = ++params.step;
  const double c1 = 1.0 - std::pow(st.cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(st.cfg.beta2, double(t));
  for (auto& [name, p] : params.entries) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ConfigError("adam_step: missing gradient for '" + name + "'");
    const Matrix& g = git->second;
    check_same_shape(p.value(), g, "adam_step");
    auto mit = st.m.find(name);
    if (mit == st.m.end()) {
      mit = st.m.emplace(name, Matrix(g.rows, g.cols)).first;
      st.v.emplace(name, Matrix(g.rows, g.cols));
    }
    Matrix& m = mit->second;
    Matrix& v = st.v.at(name);
    Matrix& val = p.mutable_value();
    for (size_t i = 0; i < g.v.size(); ++i) {
      m.v[i] = st.cfg.beta1 * m.v[i] + (1.0 - st.cfg.beta1) * g.v[i];
      v.v[i] = st.cfg.beta2 * v.v[i] + (1.0 - st.cfg.beta2) * g.v[i] * g.v[i];
      const double mhat = m.v[i] / c1;
      const double vhat = v.v[i] / c2;
      val.v[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
  }
}

}  // namespace sadi::nn
