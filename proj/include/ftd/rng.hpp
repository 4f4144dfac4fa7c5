#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

#include "ftd/tensor.hpp"

namespace ftd {

/// SplitMix64 output function (Steele, Lea & Flood, 2014).
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// Counter-based generator. Draw number `counter` is
///   splitmix64_mix(seed + (counter + 1) * 0x9E3779B97F4A7C15)
/// with wrapping 64-bit arithmetic, which is exactly the SplitMix64 stream
/// seeded with `seed`. Only integer arithmetic is involved, so a given
/// (seed, counter) yields the same bits on every platform.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t next_u64() noexcept {
    ++counter;
    return splitmix64_mix(seed + counter * kGoldenGamma);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double next_uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n) by modulo reduction (bias < n / 2^64).
  std::uint64_t next_index(std::uint64_t n) noexcept { return next_u64() % n; }

  /// Independent stream keyed by a seed and a tuple of integers.
  static RngState derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
    std::uint64_t h = splitmix64_mix(seed ^ 0x6A09E667F3BCC909ULL);
    for (std::uint64_t k : keys) h = splitmix64_mix(h ^ (k + kGoldenGamma));
    return RngState{h, 0};
  }

  friend bool operator==(const RngState&, const RngState&) = default;
};

/// Standard normal draws by Box-Muller. Each pair of outputs consumes two
/// counter steps: u1 = (bits + 1) * 2^-53 in (0, 1], u2 = bits * 2^-53 in
/// [0, 1); z0 = r cos(2 pi u2), z1 = r sin(2 pi u2) with r = sqrt(-2 ln u1).
/// An odd-length request discards the final sine draw.
template <typename T>
Tensor<T> sample_normal(RngState& rng, Shape shape) {
  Tensor<T> out(std::move(shape));
  auto data = out.data();
  for (std::size_t i = 0; i < data.size(); i += 2) {
    const double u1 = static_cast<double>((rng.next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng.next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    data[i] = static_cast<T>(r * std::cos(theta));
    if (i + 1 < data.size()) data[i + 1] = static_cast<T>(r * std::sin(theta));
  }
  return out;
}

}  // namespace ftd
