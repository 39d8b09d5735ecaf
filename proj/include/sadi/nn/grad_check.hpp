#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "sadi/nn/ops.hpp"
#include "sadi/nn/param_store.hpp"

namespace sadi::nn {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double ad = 0.0, fd = 0.0;  // the disagreeing pair at the maximum
};

// Compares reverse-mode gradients of a scalar loss against central finite
// differences over every entry of every parameter. `f` must rebuild its graph
// from the current parameter values on each call.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, ParamStore& params, double h = 1e-5) {
  if (h <= 0.0) throw ArgError("grad_check: step must be positive");
  Tensor loss = f();
  if (loss.rows() != 1 || loss.cols() != 1) throw DimError("grad_check: loss must be scalar");
  if (!std::isfinite(loss.value()(0, 0))) throw NumericError("grad_check: non-finite loss");
  GradBuffer buf;
  backprop(loss, buf);

  auto eval = [&]() {
    NoGradGuard ng;
    const double y = f().value()(0, 0);
    if (!std::isfinite(y)) throw NumericError("grad_check: non-finite loss under perturbation");
    return y;
  };

  GradCheckResult res;
  for (auto& [name, p] : params.entries) {
    const Matrix* g = buf.find(p);
    Matrix& val = p.mutable_value();
    for (size_t i = 0; i < val.v.size(); ++i) {
      const double saved = val.v[i];
      val.v[i] = saved + h;
      const double up = eval();
      val.v[i] = saved - h;
      const double dn = eval();
      val.v[i] = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double ad = g ? g->v[i] : 0.0;
      const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = i;
        res.ad = ad;
        res.fd = fd;
      }
    }
  }
  return res;
}

}  // namespace sadi::nn
