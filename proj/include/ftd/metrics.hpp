#pragma once

// Binary masks, Dice / IoU overlap metrics and the segmentation losses.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/ops.hpp"

namespace ftd {

/// Binary mask [H, W] with values exactly 0 or 1.
struct SegMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  SegMask() = default;
  SegMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b) : height(h), width(w), bits(std::move(b)) {
    if (bits.size() != h * w) throw ShapeError("SegMask: data length does not match " + std::to_string(h) + "x" + std::to_string(w));
    for (auto v : bits)
      if (v > 1) throw std::invalid_argument("SegMask: values must be 0 or 1");
  }

  std::size_t size() const { return bits.size(); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : bits) c += v;
    return c;
  }

  template <typename T>
  Tensor<T> as_tensor() const {
    return Tensor<T>(Shape{height, width}, std::vector<T>(bits.begin(), bits.end()));
  }

  /// Pixels with probability >= 0.5, i.e. logit >= 0.
  template <typename T>
  static SegMask from_logits(const Tensor<T>& logits) {
    std::vector<std::uint8_t> b(logits.size());
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = logits[i] >= T(0) ? 1 : 0;
    return SegMask(logits.dim(0), logits.dim(1), std::move(b));
  }

  static SegMask full(std::size_t h, std::size_t w, std::uint8_t v) {
    return SegMask(h, w, std::vector<std::uint8_t>(h * w, v));
  }

  friend bool operator==(const SegMask&, const SegMask&) = default;
};

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t pred = 0;
  std::size_t target = 0;
  std::size_t union_size() const { return pred + target - intersection; }
};

inline OverlapCounts overlap_counts(const SegMask& pred, const SegMask& target) {
  if (pred.height != target.height || pred.width != target.width) {
    throw ShapeError("mask shape mismatch " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs " + std::to_string(target.height) + "x" + std::to_string(target.width));
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    c.pred += pred.bits[i];
    c.target += target.bits[i];
    c.intersection += pred.bits[i] & target.bits[i];
  }
  return c;
}

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice_metric(const SegMask& pred, const SegMask& target) {
  const OverlapCounts c = overlap_counts(pred, target);
  if (c.pred + c.target == 0) return 1.0;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.pred + c.target);
}

/// |A n B| / |A u B|; 1 when both masks are empty.
inline double iou_metric(const SegMask& pred, const SegMask& target) {
  const OverlapCounts c = overlap_counts(pred, target);
  if (c.union_size() == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(c.union_size());
}

template <typename T>
Var<T> dice_loss(const Var<T>& probs, const SegMask& target, double smooth = 1.0) {
  return ops::dice_loss(probs, target.as_tensor<T>().reshaped(probs.shape()), smooth);
}

template <typename T>
Var<T> ce_loss(const Var<T>& logits, const SegMask& target) {
  return ops::bce_with_logits(logits, target.as_tensor<T>().reshaped(logits.shape()));
}

template <typename T>
struct CombinedLoss {
  Var<T> total;
  double dice = 0.0;
  double ce = 0.0;
};

/// dice_loss(sigmoid(logits)) + ce_loss(logits), with both terms reported.
template <typename T>
CombinedLoss<T> combined_loss(const Var<T>& logits, const SegMask& target, double smooth = 1.0) {
  Var<T> d = dice_loss(ops::sigmoid(logits), target, smooth);
  Var<T> c = ce_loss(logits, target);
  return {ops::add(d, c), d.value().item(), c.value().item()};
}

}  // namespace ftd
