#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/autograd.hpp"

namespace ftd {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers are positional: the i-th buffer belongs to the i-th
/// parameter passed to adam_step, so callers must pass the same list each step.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are skipped entirely.
template <typename T>
void adam_step(const std::vector<NamedParam<T>>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.param->value.shape());
      state.v.emplace_back(p.param->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter list changed between steps");
  }
  for (const auto& p : params) {
    if (p.param->trainable && p.param->grad.shape() != p.param->value.shape()) {
      throw std::invalid_argument("adam_step: missing gradient for " + p.name);
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k].param;
    if (!p.trainable) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
      p.value[i] = static_cast<T>(p.value[i] - update);
    }
  }
}

}  // namespace ftd
