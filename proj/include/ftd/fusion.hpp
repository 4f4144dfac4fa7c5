#pragma once

// Diffusion feature extraction and the trainable text-conditioned head:
// cross-modal attention over the feature stack followed by a per-pixel MLP.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/diffusion.hpp"
#include "ftd/layers.hpp"
#include "ftd/text_encoder.hpp"
#include "ftd/unet.hpp"

namespace ftd {

struct FeatureProvenance {
  int t;
  int block;
  std::size_t channel_begin;
  std::size_t channel_end;
};

template <typename T>
struct FeatureStack {
  Tensor<T> data;  // [C_total, H, W]
  std::vector<FeatureProvenance> provenance;

  std::size_t channels() const { return data.dim(0); }
};

/// Native-resolution activations for every (t, block) pair, in extraction order.
template <typename T>
struct FeatureTaps {
  std::size_t height = 0, width = 0;
  std::vector<int> timesteps;
  std::vector<int> blocks;
  std::vector<Tensor<T>> maps;  // index = ti * blocks.size() + bi
};

/// Noise for (seed, sample id, t) is drawn from its own derived stream, so a
/// sample's features do not depend on what else was extracted before it.
inline RngState feature_noise_stream(std::uint64_t seed, std::uint64_t sample_id, int t) {
  return RngState::derive(seed, {0x66656174 /* "feat" */, sample_id, static_cast<std::uint64_t>(t)});
}

/// Runs the (frozen) U-Net on x_t = q_sample(x0, t, eps_t) for each t and
/// records the requested blocks. `x0` is an image in [0, 1].
template <typename T>
FeatureTaps<T> extract_taps(const Tensor<T>& x0, UNet<T>& unet, const NoiseSchedule& schedule,
                            std::vector<int> timesteps, std::vector<int> blocks, std::uint64_t seed,
                            std::uint64_t sample_id) {
  std::sort(timesteps.begin(), timesteps.end());
  std::sort(blocks.begin(), blocks.end());
  if (timesteps.empty() || blocks.empty()) throw std::invalid_argument("extract_features: empty timesteps or blocks");
  if (std::adjacent_find(timesteps.begin(), timesteps.end()) != timesteps.end() ||
      std::adjacent_find(blocks.begin(), blocks.end()) != blocks.end()) {
    throw std::invalid_argument("extract_features: duplicate timestep or block");
  }
  for (int t : timesteps) schedule.check_t(t);
  const int nblocks = static_cast<int>(unet.block_count());
  for (int b : blocks)
    if (b < 1 || b > nblocks) throw std::invalid_argument("extract_features: invalid block " + std::to_string(b));

  FeatureTaps<T> taps;
  taps.height = x0.dim(1);
  taps.width = x0.dim(2);
  taps.timesteps = timesteps;
  taps.blocks = blocks;
  const TapRequest request(blocks.begin(), blocks.end());
  const Tensor<T> x0s = to_signed_range(x0);
  for (int t : timesteps) {
    RngState rng = feature_noise_stream(seed, sample_id, t);
    const Tensor<T> eps = sample_normal<T>(rng, x0.shape());
    UNetOutput<T> out = unet.forward(constant(q_sample(x0s, t, eps, schedule)), t, request);
    for (int b : blocks) taps.maps.push_back(std::move(out.activations.at(b)));
  }
  return taps;
}

/// Upsamples every tap bilinearly to the input size and concatenates along
/// channels in (t ascending, block ascending) order.
template <typename T>
FeatureStack<T> assemble_stack(const FeatureTaps<T>& taps) {
  std::size_t total = 0;
  for (const auto& m : taps.maps) total += m.dim(0);
  FeatureStack<T> fs;
  fs.data = Tensor<T>(Shape{total, taps.height, taps.width});
  const std::size_t plane = taps.height * taps.width;
  std::size_t ch = 0;
  for (std::size_t ti = 0; ti < taps.timesteps.size(); ++ti) {
    for (std::size_t bi = 0; bi < taps.blocks.size(); ++bi) {
      const Tensor<T>& m = taps.maps[ti * taps.blocks.size() + bi];
      const Tensor<T> up = kernels::upsample_bilinear(m, taps.height, taps.width);
      std::copy(up.data().begin(), up.data().end(), fs.data.ptr() + ch * plane);
      fs.provenance.push_back({taps.timesteps[ti], taps.blocks[bi], ch, ch + m.dim(0)});
      ch += m.dim(0);
    }
  }
  return fs;
}

template <typename T>
FeatureStack<T> extract_features(const Tensor<T>& x0, UNet<T>& unet, const NoiseSchedule& schedule,
                                 const std::vector<int>& timesteps, const std::vector<int>& blocks,
                                 std::uint64_t seed, std::uint64_t sample_id) {
  return assemble_stack(extract_taps(x0, unet, schedule, timesteps, blocks, seed, sample_id));
}

/// C_total for a (timesteps, blocks) selection without running the network.
inline std::size_t feature_channels(const UNetConfig& cfg, std::size_t n_timesteps, const std::vector<int>& blocks) {
  const auto table = list_blocks(cfg);
  std::size_t sum = 0;
  for (int b : blocks) {
    if (b < 1 || b > static_cast<int>(table.size())) throw std::invalid_argument("invalid block " + std::to_string(b));
    sum += table[static_cast<std::size_t>(b - 1)].channels;
  }
  return sum * n_timesteps;
}

struct FusionConfig {
  std::size_t d_vis = 128;
  std::size_t d_attn = 128;
  std::size_t heads = 4;
  std::size_t classifier_hidden = 64;

  void validate() const {
    if (d_vis == 0) throw std::invalid_argument("fusion.d_vis: must be positive");
    if (heads == 0 || d_attn == 0 || d_attn % heads != 0) {
      throw std::invalid_argument("fusion.d_attn: must be divisible by fusion.heads");
    }
  }
};

/// Trainable cross-modal block: input projection C_total -> d_vis, then
/// Q = x W_q, K = t W_k, V = t W_v, per-head softmax(Q K^T / sqrt(d_k)) V,
/// heads concatenated, projected by W_o and added back onto x.
template <typename T>
struct CrossModalParams {
  Param<T> w_in;  // [C_total, d_vis]
  Param<T> b_in;  // [d_vis]
  Param<T> w_q;   // [d_vis, d_attn]
  Param<T> w_k;   // [d_model, d_attn]
  Param<T> w_v;   // [d_model, d_attn]
  Param<T> w_o;   // [d_attn, d_vis]
  std::size_t heads = 1;

  CrossModalParams() = default;
  CrossModalParams(std::size_t c_total, std::size_t d_model, const FusionConfig& cfg, RngState& rng)
      : w_in(normal_init<T>(rng, {c_total, cfg.d_vis}, 1.0 / std::sqrt(static_cast<double>(c_total)))),
        b_in(Tensor<T>(Shape{cfg.d_vis})),
        w_q(normal_init<T>(rng, {cfg.d_vis, cfg.d_attn}, 1.0 / std::sqrt(static_cast<double>(cfg.d_vis)))),
        w_k(normal_init<T>(rng, {d_model, cfg.d_attn}, 1.0 / std::sqrt(static_cast<double>(d_model)))),
        w_v(normal_init<T>(rng, {d_model, cfg.d_attn}, 1.0 / std::sqrt(static_cast<double>(d_model)))),
        w_o(normal_init<T>(rng, {cfg.d_attn, cfg.d_vis}, 0.1 / std::sqrt(static_cast<double>(cfg.d_attn)))),
        heads(cfg.heads) {
    cfg.validate();
  }

  std::size_t d_vis() const { return w_in.value.dim(1); }
  std::size_t d_attn() const { return w_q.value.dim(1); }

  void collect(std::vector<NamedParam<T>>& out) {
    out.push_back({"fusion.w_in", &w_in});
    out.push_back({"fusion.b_in", &b_in});
    out.push_back({"fusion.w_q", &w_q});
    out.push_back({"fusion.w_k", &w_k});
    out.push_back({"fusion.w_v", &w_v});
    out.push_back({"fusion.w_o", &w_o});
  }
};

/// Per-pixel MLP d_vis -> hidden (SiLU) -> 1 logit; hidden == 0 is a single affine map.
template <typename T>
struct PixelClassifier {
  std::vector<Linear<T>> layers;

  PixelClassifier() = default;
  PixelClassifier(std::size_t d_vis, std::size_t hidden, RngState& rng) {
    if (hidden == 0) {
      layers.emplace_back(d_vis, 1, rng);
    } else {
      layers.emplace_back(d_vis, hidden, rng);
      layers.emplace_back(hidden, 1, rng);
    }
  }

  std::size_t input_width() const { return layers.front().weight.value.dim(0); }

  void collect(std::vector<NamedParam<T>>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect("pixclf.layer" + std::to_string(i), out);
  }
};

/// Scaled dot-product attention of query rows q [N, d_attn] over key/value
/// rows k, v [S, d_attn], split into `heads` heads; PAD keys get zero weight.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                            const std::vector<std::uint8_t>& key_valid) {
  const std::size_t d = q.shape()[1];
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t dk = d / heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = ops::slice_cols(q, h * dk, dk);
    Var<T> kh = ops::slice_cols(k, h * dk, dk);
    Var<T> vh = ops::slice_cols(v, h * dk, dk);
    Var<T> scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv);
    outs.push_back(ops::matmul(ops::masked_softmax_rows(scores, key_valid), vh));
  }
  return heads == 1 ? outs.front() : ops::concat_cols(outs);
}

/// h: feature stack [C_total, H, W]; returns fused features [d_vis, H, W].
template <typename T>
Var<T> cross_modal_attend(const Var<T>& h, const TextEmbedding<T>& text, CrossModalParams<T>& p) {
  const Shape& s = h.shape();
  if (s.size() != 3 || s[0] != p.w_in.value.dim(0)) {
    throw ShapeError("cross_modal_attend: features " + shape_str(s) + " do not match input projection " +
                     shape_str(p.w_in.value.shape()));
  }
  if (std::none_of(text.valid.begin(), text.valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw std::invalid_argument("cross_modal_attend: text has no non-PAD tokens");
  }
  const std::size_t hw = s[1] * s[2];
  // [C_total, HW]^T W_in -> [HW, d_vis]
  Var<T> x = ops::add_bias_rows(ops::matmul_tn(ops::reshape(h, Shape{s[0], hw}), parameter(p.w_in)), parameter(p.b_in));
  Var<T> t = constant(text.tokens);
  Var<T> q = ops::matmul(x, parameter(p.w_q));
  Var<T> k = ops::matmul(t, parameter(p.w_k));
  Var<T> v = ops::matmul(t, parameter(p.w_v));
  Var<T> attn = scaled_dot_attention(q, k, v, p.heads, text.valid);
  Var<T> fused = ops::add(x, ops::matmul(attn, parameter(p.w_o)));
  return ops::reshape(ops::transpose(fused), Shape{p.d_vis(), s[1], s[2]});
}

/// fused [d_vis, H, W] -> logits [H, W], same MLP at every position.
template <typename T>
Var<T> pixel_classify(const Var<T>& fused, PixelClassifier<T>& clf) {
  const Shape& s = fused.shape();
  if (s.size() != 3 || s[0] != clf.input_width()) {
    throw ShapeError("pixel_classify: input " + shape_str(s) + " does not match classifier width " +
                     std::to_string(clf.input_width()));
  }
  Var<T> x = ops::transpose(ops::reshape(fused, Shape{s[0], s[1] * s[2]}));
  for (std::size_t i = 0; i < clf.layers.size(); ++i) {
    x = clf.layers[i](x);
    if (i + 1 < clf.layers.size()) x = ops::silu(x);
  }
  return ops::reshape(x, Shape{s[1], s[2]});
}

}  // namespace ftd
