#pragma once

// Finite-difference checks of the two trained subgraphs, in float64 at toy
// sizes: the fusion head under the segmentation loss, and the U-Net under the
// noise-prediction loss. Parameters are re-drawn at random first so that no
// zero-initialized layer (conv_out, biases) hides a broken gradient upstream.

#include <cstdint>

#include "ftd/fusion.hpp"
#include "ftd/gradcheck.hpp"
#include "ftd/metrics.hpp"

namespace ftd {

template <typename T>
void randomize_params(const std::vector<NamedParam<T>>& params, RngState& rng, double stddev) {
  for (const auto& p : params) p.param->value = normal_init<T>(rng, p.param->value.shape(), stddev);
}

/// 6-channel 4x4 features, 3 tokens (one PAD), 2 heads, hidden width 5.
inline double fusion_head_grad_error(std::uint64_t seed = 0) {
  RngState rng = RngState::derive(seed, {0x67636b31 /* "gck1" */});
  const FusionConfig cfg{8, 8, 2, 5};
  CrossModalParams<double> fusion(6, 4, cfg, rng);
  PixelClassifier<double> clf(cfg.d_vis, cfg.classifier_hidden, rng);
  std::vector<NamedParam<double>> params;
  fusion.collect(params);
  clf.collect(params);
  randomize_params(params, rng, 0.5);

  const Tensor<double> features = sample_normal<double>(rng, {6, 4, 4});
  TextEmbedding<double> text{sample_normal<double>(rng, {3, 4}), {1, 1, 0}};
  std::vector<std::uint8_t> bits(16);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.next_index(2));
  const SegMask target(4, 4, bits);

  auto loss = [&] {
    Var<double> z = pixel_classify(cross_modal_attend(constant(features), text, fusion), clf);
    return combined_loss(z, target, 1.0).total;
  };
  return grad_check(loss, params);
}

/// Two-level U-Net (base 4, one block per level) on a 4x4 image at t = 10.
inline double unet_ddpm_grad_error(std::uint64_t seed = 0) {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.channel_mults = {1, 2};
  cfg.blocks_per_level = 1;
  cfg.groups = 2;
  UNet<double> unet(cfg, seed);
  RngState rng = RngState::derive(seed, {0x67636b32 /* "gck2" */});
  const auto params = unet.named_params();
  randomize_params(params, rng, 0.3);

  const NoiseSchedule schedule = linear_schedule(1000, 1e-4, 0.02);
  const Tensor<double> x0 = sample_normal<double>(rng, {1, 4, 4});
  const Tensor<double> eps = sample_normal<double>(rng, {1, 4, 4});
  const Tensor<double> x_t = q_sample(x0, 10, eps, schedule);
  auto loss = [&] { return ddpm_loss(unet.forward(constant(x_t), 10).eps, eps); };
  return grad_check(loss, params);
}

}  // namespace ftd
