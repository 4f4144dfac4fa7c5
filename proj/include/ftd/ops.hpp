#pragma once

// Differentiable operations on Var. Each op registers its backward rule; the
// rules only touch parents that require a gradient.

#include <cmath>
#include <vector>

#include "ftd/autograd.hpp"
#include "ftd/kernels.hpp"

namespace ftd::ops {

using kernels::Padding;

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> c = kernels::matmul(a.value(), b.value());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  return make_op<T>("matmul", std::move(c), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    if (pa.requires_grad)
      kernels::gemm(self.grad.ptr(), pb.value.ptr(), pa.grad_buffer().ptr(), m, n, k, false, true, true);
    if (pb.requires_grad)
      kernels::gemm(pa.value.ptr(), self.grad.ptr(), pb.grad_buffer().ptr(), k, m, n, true, false, true);
  });
}

/// a^T b for a [K, M], b [K, N], without materializing the transpose.
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("matmul_tn: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  Tensor<T> c(Shape{m, n});
  kernels::gemm(a.value().ptr(), b.value().ptr(), c.ptr(), m, k, n, true, false, false);
  return make_op<T>("matmul_tn", std::move(c), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    if (pa.requires_grad)
      kernels::gemm(pb.value.ptr(), self.grad.ptr(), pa.grad_buffer().ptr(), k, n, m, false, true, true);
    if (pb.requires_grad)
      kernels::gemm(pa.value.ptr(), self.grad.ptr(), pb.grad_buffer().ptr(), k, m, n, false, false, true);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  accumulate(y, b.value());
  return make_op<T>("add", std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (self.parent(i).requires_grad) accumulate(self.parent(i).grad_buffer(), self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op<T>("sub", std::move(y), {a, b}, [](Node<T>& self) {
    if (self.parent(0).requires_grad) accumulate(self.parent(0).grad_buffer(), self.grad);
    if (self.parent(1).requires_grad) {
      auto& g = self.parent(1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op<T>("mul", std::move(y), {a, b}, [](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.data()) v *= s;
  return make_op<T>("scale", std::move(y), {a}, [s](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// x [N, D] + b [D] broadcast over rows.
template <typename T>
Var<T> add_bias_rows(const Var<T>& x, const Var<T>& b) {
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (b.value().size() != d) {
    throw ShapeError("add_bias_rows: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> y = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) y(r, j) += b.value()[j];
  return make_op<T>("add_bias_rows", std::move(y), {x, b}, [n, d](Node<T>& self) {
    if (self.parent(0).requires_grad) accumulate(self.parent(0).grad_buffer(), self.grad);
    if (self.parent(1).requires_grad) {
      auto& g = self.parent(1).grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad(r, j);
    }
  });
}

/// x [C, H, W] + b [C] broadcast over the spatial grid.
template <typename T>
Var<T> add_bias_channels(const Var<T>& x, const Var<T>& b) {
  const std::size_t c = x.shape()[0], hw = x.value().size() / c;
  if (b.value().size() != c) {
    throw ShapeError("add_bias_channels: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> y = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) y[ch * hw + i] += b.value()[ch];
  return make_op<T>("add_bias_channels", std::move(y), {x, b}, [c, hw](Node<T>& self) {
    if (self.parent(0).requires_grad) accumulate(self.parent(0).grad_buffer(), self.grad);
    if (self.parent(1).requires_grad) {
      auto& g = self.parent(1).grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += self.grad[ch * hw + i];
        g[ch] += s;
      }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  if (x.value().rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  return make_op<T>("transpose", kernels::transpose2d(x.value()), {x}, [](Node<T>& self) {
    accumulate(self.parent(0).grad_buffer(), kernels::transpose2d(self.grad));
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return make_op<T>("reshape", x.value().reshaped(std::move(shape)), {x}, [](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Columns [start, start + len) of [N, D].
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (start + len > d) throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  Tensor<T> y(Shape{n, len});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < len; ++j) y(r, j) = x.value()(r, start + j);
  return make_op<T>("slice_cols", std::move(y), {x}, [n, start, len](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < len; ++j) g(r, start + j) += self.grad(r, j);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  const std::size_t n = parts.at(0).shape()[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[0] != n) throw ShapeError("concat_cols: row count mismatch");
    total += p.shape()[1];
  }
  Tensor<T> y(Shape{n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) y(r, off + j) = p.value()(r, j);
    off += w;
  }
  return make_op<T>("concat_cols", std::move(y), parts, [n](Node<T>& self) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node<T>& p = self.parent(i);
      const std::size_t w = p.value.shape()[1];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < w; ++j) g(r, j) += self.grad(r, o + j);
      }
      o += w;
    }
  });
}

/// Concatenation along axis 0 (channels for [C, H, W]).
template <typename T>
Var<T> concat0(const Var<T>& a, const Var<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw ShapeError("concat0: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  Shape so = sa;
  so[0] += sb[0];
  std::vector<T> data(a.value().data().begin(), a.value().data().end());
  data.insert(data.end(), b.value().data().begin(), b.value().data().end());
  const std::size_t na = a.value().size();
  return make_op<T>("concat0", Tensor<T>(so, std::move(data)), {a, b}, [na](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  return make_op<T>("softmax", kernels::softmax(x.value(), axis), {x}, [axis](Node<T>& self) {
    kernels::softmax_backward(self.value, self.grad, axis, self.parent(0).grad_buffer());
  });
}

/// Row softmax over [N, S] with PAD columns excluded (exactly zero weight).
template <typename T>
Var<T> masked_softmax_rows(const Var<T>& x, const std::vector<std::uint8_t>& key_valid) {
  return make_op<T>("masked_softmax_rows", kernels::masked_softmax_rows(x.value(), key_valid), {x},
                    [](Node<T>& self) {
                      // Masked entries have y == 0 and so receive zero gradient.
                      kernels::softmax_backward(self.value, self.grad, 1, self.parent(0).grad_buffer());
                    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernels, std::size_t stride, Padding padding) {
  Tensor<T> y = kernels::conv2d(x.value(), kernels.value(), stride, padding);
  return make_op<T>("conv2d", std::move(y), {x, kernels}, [stride, padding](Node<T>& self) {
    Node<T>& px = self.parent(0);
    Node<T>& pk = self.parent(1);
    kernels::conv2d_backward(px.value, pk.value, self.grad, stride, padding,
                             px.requires_grad ? &px.grad_buffer() : nullptr,
                             pk.requires_grad ? &pk.grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  double eps = 1e-5) {
  auto stats = std::make_shared<kernels::NormStats>();
  Tensor<T> y = kernels::group_norm(x.value(), gamma.value(), beta.value(), groups, eps, stats.get());
  return make_op<T>("group_norm", std::move(y), {x, gamma, beta}, [groups, stats](Node<T>& self) {
    Node<T>& px = self.parent(0);
    Node<T>& pg = self.parent(1);
    Node<T>& pb = self.parent(2);
    kernels::group_norm_backward(px.value, pg.value, groups, *stats, self.grad,
                                 px.requires_grad ? &px.grad_buffer() : nullptr,
                                 pg.requires_grad ? &pg.grad_buffer() : nullptr,
                                 pb.requires_grad ? &pb.grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
  auto stats = std::make_shared<kernels::NormStats>();
  Tensor<T> y = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps, stats.get());
  return make_op<T>("layer_norm", std::move(y), {x, gamma, beta}, [stats](Node<T>& self) {
    Node<T>& px = self.parent(0);
    Node<T>& pg = self.parent(1);
    Node<T>& pb = self.parent(2);
    kernels::layer_norm_backward(px.value, pg.value, *stats, self.grad,
                                 px.requires_grad ? &px.grad_buffer() : nullptr,
                                 pg.requires_grad ? &pg.grad_buffer() : nullptr,
                                 pb.requires_grad ? &pb.grad_buffer() : nullptr);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = sigmoid_scalar(v);
  return make_op<T>("sigmoid", std::move(y), {x}, [](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i] * (T(1) - self.value[i]);
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = v * sigmoid_scalar(v);
  return make_op<T>("silu", std::move(y), {x}, [](Node<T>& self) {
    Node<T>& p = self.parent(0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = sigmoid_scalar(p.value[i]);
      g[i] += self.grad[i] * s * (T(1) + p.value[i] * (T(1) - s));
    }
  });
}

/// 2x2 average pooling of [C, H, W] (H, W even).
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size " + shape_str(x.shape()));
  Tensor<T> y(Shape{c, h / 2, w / 2});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j)
        y(ch, i, j) = T(0.25) * (xv(ch, 2 * i, 2 * j) + xv(ch, 2 * i, 2 * j + 1) +
                                 xv(ch, 2 * i + 1, 2 * j) + xv(ch, 2 * i + 1, 2 * j + 1));
  return make_op<T>("avg_pool2", std::move(y), {x}, [c, h, w](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) g(ch, i, j) += T(0.25) * self.grad(ch, i / 2, j / 2);
  });
}

/// Nearest-neighbour 2x upsampling of [C, H, W].
template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor<T> y(Shape{c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) y(ch, i, j) = xv(ch, i / 2, j / 2);
  return make_op<T>("upsample_nearest2", std::move(y), {x}, [c, h, w](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) g(ch, i / 2, j / 2) += self.grad(ch, i, j);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  return make_op<T>("sum", Tensor<T>::scalar(static_cast<T>(s)), {x}, [](Node<T>& self) {
    auto& g = self.parent(0).grad_buffer();
    const T gy = self.grad[0];
    for (auto& v : g.data()) v += gy;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

/// mean((pred - target)^2); target is a constant.
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "mse_loss");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    s += d * d;
  }
  return make_op<T>("mse_loss", Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {pred},
                    [target, n](Node<T>& self) {
                      Node<T>& p = self.parent(0);
                      auto& g = p.grad_buffer();
                      const T k = self.grad[0] * T(2) / static_cast<T>(n);
                      for (std::size_t i = 0; i < n; ++i) g[i] += k * (p.value[i] - target[i]);
                    });
}

/// Mean binary cross-entropy on logits: max(x,0) - x*y + log(1 + exp(-|x|)).
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
  require_same_shape(logits.shape(), target.shape(), "ce_loss");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.value()[i], y = target[i];
    s += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  return make_op<T>("ce_loss", Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {logits},
                    [target, n](Node<T>& self) {
                      Node<T>& p = self.parent(0);
                      auto& g = p.grad_buffer();
                      const T k = self.grad[0] / static_cast<T>(n);
                      for (std::size_t i = 0; i < n; ++i) g[i] += k * (sigmoid_scalar(p.value[i]) - target[i]);
                    });
}

/// Soft Dice loss 1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s).
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, double smooth) {
  require_same_shape(probs.shape(), target.shape(), "dice_loss");
  if (!(smooth > 0.0)) throw std::invalid_argument("dice_loss: smooth must be positive");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    inter += static_cast<double>(probs.value()[i]) * target[i];
    sp += probs.value()[i];
    sg += target[i];
  }
  const double num = 2.0 * inter + smooth, den = sp + sg + smooth;
  return make_op<T>("dice_loss", Tensor<T>::scalar(static_cast<T>(1.0 - num / den)), {probs},
                    [target, num, den](Node<T>& self) {
                      auto& g = self.parent(0).grad_buffer();
                      const double gy = self.grad[0];
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const double d = -(2.0 * target[i] * den - num) / (den * den);
                        g[i] += static_cast<T>(gy * d);
                      }
                    });
}

}  // namespace ftd::ops
