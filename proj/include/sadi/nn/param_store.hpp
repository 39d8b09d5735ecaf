#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sadi/nn/tensor.hpp"
#include "sadi/rng.hpp"

namespace sadi::nn {

// Named trainable parameters. The map keeps names sorted, so every iteration
// (optimizer sweeps, serialization, hashing) sees a fixed order.
struct ParamStore {
  std::map<std::string, Tensor> entries;
  int64_t step = 0;  // optimizer steps taken; drives Adam bias correction

  Tensor& add(const std::string& name, Matrix init) {
    auto [it, inserted] = entries.emplace(name, Tensor());
    if (!inserted) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
    it->second = Tensor::param(std::move(init));
    return it->second;
  }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : entries) n += t.value().size();
    return n;
  }
};

// Symmetric uniform init scaled by fan-in (the incoming dimension of x @ W).
inline Matrix fan_in_uniform(Rng& rng, int rows, int cols, int fan_in) {
  if (fan_in < 1) throw ArgError("fan_in_uniform: fan_in must be >= 1");
  const double bound = 1.0 / std::sqrt(double(fan_in));
  Matrix m(rows, cols);
  for (double& e : m.v) e = (2.0 * rng.uniform() - 1.0) * bound;
  return m;
}

}  // namespace sadi::nn
