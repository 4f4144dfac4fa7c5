#pragma once

// Small noise-prediction U-Net eps_theta(x_t, t) with tappable residual blocks.
//
// Layout (DDPM style), L = channel_mults.size() levels, bpl = blocks_per_level:
//   conv_in 3x3 -> encoder: per level, bpl residual blocks at base * mult[l],
//   then 2x2 average pooling except after the last level -> 2 middle blocks at
//   the deepest width -> decoder: per level from deepest up, bpl + 1 residual
//   blocks, each consuming the channel concatenation of the running features
//   and one stored skip, then nearest 2x upsampling except at level 0 ->
//   GroupNorm, SiLU, conv_out 3x3 (zero-initialized).
//
// Block indices count residual blocks in forward order starting at 1:
// encoder, then middle, then decoder. The default config (3 levels, 2 blocks
// per level) therefore has 17 blocks: 1-6 encoder, 7-8 middle, 9-17 decoder.
//
// Timestep conditioning: sinusoidal embedding of width base_channels, then
// Linear -> SiLU -> Linear -> SiLU to width 4 * base_channels; each residual
// block projects it to its output width and adds it per channel right after
// its first convolution.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/layers.hpp"

namespace ftd {

struct UNetConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 16;
  std::vector<std::size_t> channel_mults{1, 2, 4};
  std::size_t blocks_per_level = 2;
  std::size_t groups = 4;
  bool attention = false;

  std::size_t levels() const { return channel_mults.size(); }
  std::size_t time_dim() const { return 4 * base_channels; }
  std::size_t spatial_multiple() const { return std::size_t{1} << (levels() - 1); }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("unet." + field + ": " + why);
    };
    if (in_channels == 0) fail("in_channels", "must be positive");
    if (base_channels == 0 || base_channels % 2 != 0) fail("base_channels", "must be positive and even");
    if (channel_mults.empty()) fail("channel_mults", "must not be empty");
    for (std::size_t m : channel_mults)
      if (m == 0) fail("channel_mults", "entries must be positive");
    if (blocks_per_level == 0) fail("blocks_per_level", "must be positive");
    if (groups == 0) fail("groups", "must be positive");
    for (std::size_t m : channel_mults)
      if ((base_channels * m) % groups != 0) fail("groups", "must divide every level width");
    if (base_channels % groups != 0) fail("groups", "must divide base_channels");
    if (attention) fail("attention", "self-attention blocks are not supported");
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct BlockInfo {
  int index;
  std::size_t channels;
  std::size_t divisor;  // input size / block spatial size

  friend bool operator==(const BlockInfo&, const BlockInfo&) = default;
};

/// Deterministic enumeration of residual blocks in forward order.
inline std::vector<BlockInfo> list_blocks(const UNetConfig& cfg) {
  std::vector<BlockInfo> out;
  int idx = 0;
  const std::size_t L = cfg.levels();
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t b = 0; b < cfg.blocks_per_level; ++b)
      out.push_back({++idx, cfg.base_channels * cfg.channel_mults[l], std::size_t{1} << l});
  for (int b = 0; b < 2; ++b)
    out.push_back({++idx, cfg.base_channels * cfg.channel_mults[L - 1], std::size_t{1} << (L - 1)});
  for (std::size_t l = L; l-- > 0;)
    for (std::size_t b = 0; b <= cfg.blocks_per_level; ++b)
      out.push_back({++idx, cfg.base_channels * cfg.channel_mults[l], std::size_t{1} << l});
  return out;
}

/// Block indices to record during a forward pass.
using TapRequest = std::set<int>;

/// Sinusoidal embedding [sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})]
/// with h = dim / 2 and w_i = 10000^(-i / h).
template <typename T>
Tensor<T> timestep_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    throw std::invalid_argument("timestep_embedding: dim must be even, got " + std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  Tensor<T> out(Shape{dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::sin(t * w));
    out[half + i] = static_cast<T>(std::cos(t * w));
  }
  return out;
}

template <typename T>
struct UNetOutput {
  Var<T> eps;
  std::map<int, Tensor<T>> activations;  // block index -> [C, h, w]
};

template <typename T>
class UNet {
 public:
  UNet(UNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    RngState rng = RngState::derive(seed, {0x756E6574 /* "unet" */});
    const std::size_t base = config_.base_channels, tdim = config_.time_dim();
    time_fc1_ = Linear<T>(base, tdim, rng);
    time_fc2_ = Linear<T>(tdim, tdim, rng);
    conv_in_ = Conv2d<T>(config_.in_channels, base, 3, rng);

    std::vector<std::size_t> skips{base};
    std::size_t cur = base;
    const std::size_t L = config_.levels();
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t ch = base * config_.channel_mults[l];
      for (std::size_t b = 0; b < config_.blocks_per_level; ++b) {
        blocks_.emplace_back(cur, ch, tdim, config_.groups, rng);
        cur = ch;
        skips.push_back(cur);
      }
      if (l + 1 < L) skips.push_back(cur);
    }
    for (int b = 0; b < 2; ++b) blocks_.emplace_back(cur, cur, tdim, config_.groups, rng);
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t ch = base * config_.channel_mults[l];
      for (std::size_t b = 0; b <= config_.blocks_per_level; ++b) {
        blocks_.emplace_back(cur + skips.back(), ch, tdim, config_.groups, rng);
        skips.pop_back();
        cur = ch;
      }
    }
    norm_out_ = GroupNorm<T>(cur, config_.groups);
    conv_out_ = Conv2d<T>(cur, config_.in_channels, 3, rng);
    conv_out_.weight.value.fill(T(0));
  }

  const UNetConfig& config() const noexcept { return config_; }
  std::size_t block_count() const noexcept { return blocks_.size(); }

  /// x: [in_channels, H, W] with H, W divisible by 2^(levels - 1).
  UNetOutput<T> forward(const Var<T>& x, int t, const TapRequest& taps = {}) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] != config_.in_channels) {
      throw std::invalid_argument("unet: expected input [" + std::to_string(config_.in_channels) +
                                  ",H,W], got " + shape_str(s));
    }
    const std::size_t m = config_.spatial_multiple();
    if (s[1] % m != 0 || s[2] % m != 0) {
      throw std::invalid_argument("unet: spatial size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                                  " not divisible by " + std::to_string(m));
    }
    for (int tap : taps) {
      if (tap < 1 || tap > static_cast<int>(blocks_.size())) {
        throw std::invalid_argument("unet: invalid tap block index " + std::to_string(tap) + " (valid 1.." +
                                    std::to_string(blocks_.size()) + ")");
      }
    }

    UNetOutput<T> out;
    const Var<T> temb = time_embedding(t);
    std::size_t next = 0;
    auto run_block = [&](const Var<T>& in) {
      Var<T> h = blocks_[next].forward(in, temb);
      const int idx = static_cast<int>(++next);
      if (taps.count(idx)) out.activations.emplace(idx, h.value());
      return h;
    };

    Var<T> h = conv_in_(x);
    std::vector<Var<T>> skips{h};
    const std::size_t L = config_.levels();
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t b = 0; b < config_.blocks_per_level; ++b) {
        h = run_block(h);
        skips.push_back(h);
      }
      if (l + 1 < L) {
        h = ops::avg_pool2(h);
        skips.push_back(h);
      }
    }
    h = run_block(h);
    h = run_block(h);
    for (std::size_t l = L; l-- > 0;) {
      for (std::size_t b = 0; b <= config_.blocks_per_level; ++b) {
        h = run_block(ops::concat0(h, skips.back()));
        skips.pop_back();
      }
      if (l > 0) h = ops::upsample_nearest2(h);
    }
    out.eps = conv_out_(ops::silu(norm_out_(h)));
    return out;
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    time_fc1_.collect("unet.time.fc1", out);
    time_fc2_.collect("unet.time.fc2", out);
    conv_in_.collect("unet.conv_in", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("unet.block" + std::to_string(i + 1), out);
    norm_out_.collect("unet.norm_out", out);
    conv_out_.collect("unet.conv_out", out);
    return out;
  }

  void set_trainable(bool trainable) { ftd::set_trainable(named_params(), trainable); }

 private:
  struct ResBlock {
    GroupNorm<T> norm1;
    Conv2d<T> conv1;
    Linear<T> temb_proj;
    GroupNorm<T> norm2;
    Conv2d<T> conv2;
    std::optional<Conv2d<T>> skip;

    ResBlock(std::size_t in, std::size_t out, std::size_t tdim, std::size_t groups, RngState& rng)
        : norm1(in, groups),
          conv1(in, out, 3, rng),
          temb_proj(tdim, out, rng),
          norm2(out, groups),
          conv2(out, out, 3, rng) {
      if (in != out) skip.emplace(in, out, 1, rng);
    }

    Var<T> forward(const Var<T>& x, const Var<T>& temb) {
      Var<T> h = conv1(ops::silu(norm1(x)));
      const std::size_t c = h.shape()[0];
      h = ops::add_bias_channels(h, ops::reshape(temb_proj(temb), Shape{c}));
      h = conv2(ops::silu(norm2(h)));
      return ops::add(h, skip ? (*skip)(x) : x);
    }

    void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
      norm1.collect(prefix + ".norm1", out);
      conv1.collect(prefix + ".conv1", out);
      temb_proj.collect(prefix + ".temb", out);
      norm2.collect(prefix + ".norm2", out);
      conv2.collect(prefix + ".conv2", out);
      if (skip) skip->collect(prefix + ".skip", out);
    }
  };

  Var<T> time_embedding(int t) {
    Var<T> e = constant(timestep_embedding<T>(t, config_.base_channels).reshaped(Shape{1, config_.base_channels}));
    return ops::silu(time_fc2_(ops::silu(time_fc1_(e))));
  }

  UNetConfig config_;
  Linear<T> time_fc1_;
  Linear<T> time_fc2_;
  Conv2d<T> conv_in_;
  std::vector<ResBlock> blocks_;
  GroupNorm<T> norm_out_;
  Conv2d<T> conv_out_;
};

}  // namespace ftd
