#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ftd/autograd.hpp"

namespace ftd {

/// Central finite differences (f(x+eps) - f(x-eps)) / (2 eps) against the
/// reverse-mode gradient of the scalar `f`, over every entry of every
/// trainable parameter. Returns max |analytic - numeric| / max(1, |numeric|).
template <typename F>
double grad_check(F&& f, const std::vector<Param<double>*>& params, double eps = 1e-5) {
  auto eval = [&]() {
    const double v = f().value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };
  for (auto* p : params) p->zero_grad();
  Var<double> root = f();
  if (!std::isfinite(root.value().item())) throw NumericError("grad_check: objective is not finite");
  backward(root);
  root = Var<double>();

  double worst = 0.0;
  for (auto* p : params) {
    if (!p->trainable) continue;
    const Tensor<double> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double fp = eval();
      p->value[i] = saved - eps;
      const double fm = eval();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

template <typename F>
double grad_check(F&& f, const std::vector<NamedParam<double>>& params, double eps = 1e-5) {
  std::vector<Param<double>*> raw;
  raw.reserve(params.size());
  for (const auto& p : params) raw.push_back(p.param);
  return grad_check(std::forward<F>(f), raw, eps);
}

}  // namespace ftd
