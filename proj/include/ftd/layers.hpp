#pragma once

// Parameterized building blocks shared by the U-Net and the fusion head.

#include <cmath>
#include <string>
#include <vector>

#include "ftd/ops.hpp"
#include "ftd/rng.hpp"

namespace ftd {

template <typename T>
Tensor<T> normal_init(RngState& rng, Shape shape, double stddev) {
  Tensor<T> t = sample_normal<T>(rng, std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(v * stddev);
  return t;
}

/// Row-wise affine map: [N, in] -> [N, out], weight stored [in, out].
template <typename T>
struct Linear {
  Param<T> weight;
  Param<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, RngState& rng, double gain = 1.0)
      : weight(normal_init<T>(rng, {in, out}, gain / std::sqrt(static_cast<double>(in)))),
        bias(Tensor<T>(Shape{out})) {}

  Var<T> operator()(const Var<T>& x) {
    return ops::add_bias_rows(ops::matmul(x, parameter(weight)), parameter(bias));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename T>
struct Conv2d {
  Param<T> weight;
  Param<T> bias;
  std::size_t stride = 1;
  kernels::Padding padding = kernels::Padding::same;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, RngState& rng, double gain = 1.0)
      : weight(normal_init<T>(rng, {out, in, k, k}, gain / std::sqrt(static_cast<double>(in * k * k)))),
        bias(Tensor<T>(Shape{out})) {}

  Var<T> operator()(const Var<T>& x) {
    return ops::add_bias_channels(ops::conv2d(x, parameter(weight), stride, padding), parameter(bias));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename T>
struct GroupNorm {
  Param<T> gamma;
  Param<T> beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t num_groups)
      : gamma(Tensor<T>(Shape{channels}, T(1))), beta(Tensor<T>(Shape{channels})), groups(num_groups) {}

  Var<T> operator()(const Var<T>& x) { return ops::group_norm(x, parameter(gamma), parameter(beta), groups); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

template <typename T>
struct LayerNorm {
  Param<T> gamma;
  Param<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(Tensor<T>(Shape{d}, T(1))), beta(Tensor<T>(Shape{d})) {}

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

}  // namespace ftd
