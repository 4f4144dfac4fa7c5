#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/adam.hpp"
#include "ftd/ops.hpp"
#include "ftd/rng.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

/// beta, alpha and alpha_bar, each indexed by timestep t = 1..T at [t - 1].
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void check_t(int t) const {
    if (t < 1 || t > T) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
  }
  double beta_at(int t) const {
    check_t(t);
    return beta[static_cast<std::size_t>(t - 1)];
  }
  double alpha_at(int t) const {
    check_t(t);
    return alpha[static_cast<std::size_t>(t - 1)];
  }
  double alpha_bar_at(int t) const {
    check_t(t);
    return alpha_bar[static_cast<std::size_t>(t - 1)];
  }
};

/// beta_t = beta_start + (t - 1) / (T - 1) * (beta_end - beta_start).
inline NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("linear_schedule: T must be >= 2, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    s.beta[i] = t == T ? beta_end
                       : beta_start + static_cast<double>(t - 1) / static_cast<double>(T - 1) *
                                          (beta_end - beta_start);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(x0.shape(), eps.shape(), "q_sample");
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

/// One forward-chain step x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps.
template <typename T>
Tensor<T> forward_step(const Tensor<T>& x_prev, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(x_prev.shape(), eps.shape(), "forward_step");
  const double b = s.beta_at(t);
  const double keep = std::sqrt(1.0 - b), noise = std::sqrt(b);
  Tensor<T> out(x_prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(keep * x_prev[i] + noise * eps[i]);
  return out;
}

/// Reverse step with fixed variance sigma_t^2 = beta_t:
///   mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)
/// returns mu + sigma_t z for t > 1 and mu exactly for t = 1.
template <typename T>
Tensor<T> p_sample(const Tensor<T>& x_t, int t, const Tensor<T>& eps_pred, const NoiseSchedule& s,
                   RngState& rng) {
  require_same_shape(x_t.shape(), eps_pred.shape(), "p_sample");
  const double b = s.beta_at(t);
  const double coef = b / std::sqrt(1.0 - s.alpha_bar_at(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(inv_sqrt_alpha * (x_t[i] - coef * eps_pred[i]));
  }
  if (t > 1) {
    const Tensor<T> z = sample_normal<T>(rng, x_t.shape());
    const double sigma = std::sqrt(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(out[i] + sigma * z[i]);
  }
  return out;
}

/// mean((eps_pred - eps)^2)
template <typename T>
T ddpm_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps) {
  return ops::mse_loss(constant(eps_pred), eps).value().item();
}

template <typename T>
Var<T> ddpm_loss(const Var<T>& eps_pred, const Tensor<T>& eps) {
  return ops::mse_loss(eps_pred, eps);
}

/// Pixel values in [0, 1] map to the denoiser's working range [-1, 1].
template <typename T>
Tensor<T> to_signed_range(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v * T(2) - T(1);
  return out;
}

/// Noise-prediction pretraining with batch size 1. Per step: pick an image
/// and t ~ U{1..T}, draw eps, and take one Adam step on
/// mse(model(q_sample(x0, t, eps), t), eps). Images are given in [0, 1].
/// Returns the per-step loss log.
template <typename T, typename Model>
std::vector<double> train_denoiser(const std::vector<Tensor<T>>& images, Model& model,
                                   const NoiseSchedule& schedule, std::size_t steps, RngState& rng,
                                   AdamState<T>& adam) {
  if (images.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  const auto params = model.named_params();
  std::vector<double> log;
  log.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const Tensor<T> x0 = to_signed_range(images[rng.next_index(images.size())]);
    const int t = 1 + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(schedule.T)));
    const Tensor<T> eps = sample_normal<T>(rng, x0.shape());
    const Tensor<T> x_t = q_sample(x0, t, eps, schedule);
    zero_grad(params);
    Var<T> loss = ddpm_loss(model.forward(constant(x_t), t).eps, eps);
    backward(loss);
    adam_step(params, adam);
    log.push_back(loss.value().item());
  }
  return log;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,loss\n";
  os.precision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
}

}  // namespace ftd
