#pragma once

// Raw forward/backward kernels on plain tensors. The autograd wrappers in
// ops.hpp and the graph-free paths (frozen text encoder) both build on these.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ftd/tensor.hpp"

namespace ftd::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// C (m x n) (+)= op(A) * op(B), all row-major.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MapMat<T> C(c, M, N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      C.noalias() += lhs * rhs;
    } else {
      C.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(ConstMapMat<T>(a, M, K), ConstMapMat<T>(b, K, N));
  } else if (trans_a && !trans_b) {
    run(ConstMapMat<T>(a, K, M).transpose(), ConstMapMat<T>(b, K, N));
  } else if (!trans_a && trans_b) {
    run(ConstMapMat<T>(a, M, K), ConstMapMat<T>(b, N, K).transpose());
  } else {
    run(ConstMapMat<T>(a, K, M).transpose(), ConstMapMat<T>(b, N, K).transpose());
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor<T> c(Shape{a.dim(0), b.dim(1)});
  gemm(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1), false, false, false);
  return c;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> y(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(j, i) = x(i, j);
  return y;
}

// ---------------------------------------------------------------------------
// conv2d: input [C_in, H, W], kernels [C_out, C_in, k, k], cross-correlation.

enum class Padding { same, valid };

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

template <typename T>
ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, std::size_t stride,
                           Padding padding) {
  if (input.size() != 3 || kernels.size() != 4) {
    throw ShapeError("conv2d: expected input [C,H,W] and kernels [Co,Ci,k,k], got " +
                     shape_str(input) + " and " + shape_str(kernels));
  }
  ConvGeometry g{};
  g.c_in = input[0];
  g.h = input[1];
  g.w = input[2];
  g.c_out = kernels[0];
  g.k = kernels[2];
  g.stride = stride;
  if (kernels[1] != g.c_in || kernels[3] != g.k) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels) + " incompatible with input " +
                     shape_str(input));
  }
  if (g.k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(g.k));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  g.pad = padding == Padding::same ? (g.k - 1) / 2 : 0;
  const std::size_t span_h = g.h + 2 * g.pad, span_w = g.w + 2 * g.pad;
  if (span_h < g.k || span_w < g.k || (span_h - g.k) % stride != 0 || (span_w - g.k) % stride != 0) {
    throw ShapeError("conv2d: stride " + std::to_string(stride) + " does not divide geometry of " +
                     shape_str(input) + " with kernel " + std::to_string(g.k));
  }
  g.h_out = (span_h - g.k) / stride + 1;
  g.w_out = (span_w - g.k) / stride + 1;
  return g;
}

/// cols[(ci*k + ky)*k + kx, oy*w_out + ox]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t out_px = g.h_out * g.w_out;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ci * g.k + ky) * g.k + kx) * out_px;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.w_out, T(0));
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t out_px = g.h_out * g.w_out;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * out_px;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride, Padding padding) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), kernels.shape(), stride, padding);
  const std::size_t patch = g.c_in * g.k * g.k, out_px = g.h_out * g.w_out;
  Tensor<T> y(Shape{g.c_out, g.h_out, g.w_out});
  if (g.k == 1 && stride == 1) {
    gemm(kernels.ptr(), x.ptr(), y.ptr(), g.c_out, patch, out_px, false, false, false);
    return y;
  }
  std::vector<T> cols(patch * out_px);
  im2col(x.ptr(), g, cols.data());
  gemm(kernels.ptr(), cols.data(), y.ptr(), g.c_out, patch, out_px, false, false, false);
  return y;
}

/// Accumulates input and kernel gradients; either output pointer may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& dy,
                     std::size_t stride, Padding padding, Tensor<T>* dx, Tensor<T>* dkernels) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), kernels.shape(), stride, padding);
  const std::size_t patch = g.c_in * g.k * g.k, out_px = g.h_out * g.w_out;
  if (g.k == 1 && stride == 1) {
    if (dkernels) gemm(dy.ptr(), x.ptr(), dkernels->ptr(), g.c_out, out_px, patch, false, true, true);
    if (dx) gemm(kernels.ptr(), dy.ptr(), dx->ptr(), patch, g.c_out, out_px, true, false, true);
    return;
  }
  std::vector<T> cols(patch * out_px);
  if (dkernels) {
    im2col(x.ptr(), g, cols.data());
    gemm(dy.ptr(), cols.data(), dkernels->ptr(), g.c_out, out_px, patch, false, true, true);
  }
  if (dx) {
    gemm(kernels.ptr(), dy.ptr(), cols.data(), patch, g.c_out, out_px, true, false, false);
    col2im(cols.data(), g, dx->ptr());
  }
}

// ---------------------------------------------------------------------------
// Normalization.

struct NormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};

/// Group normalization over [C, H, W]: each group of C/groups channels is
/// normalized jointly, then scaled and shifted per channel.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t groups, double eps, NormStats* stats) {
  if (x.rank() != 3) throw ShapeError("group_norm: expected [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.size() != c || beta.size() != c) throw ShapeError("group_norm: affine size mismatch");
  const std::size_t cg = c / groups, n = cg * hw;
  Tensor<T> y(x.shape());
  NormStats local;
  NormStats& st = stats ? *stats : local;
  st.mean.assign(groups, 0.0);
  st.rstd.assign(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* src = x.ptr() + g * n;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += src[i];
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    st.mean[g] = mean;
    st.rstd[g] = rstd;
    for (std::size_t cc = 0; cc < cg; ++cc) {
      const std::size_t ch = g * cg + cc;
      const double ga = gamma[ch], be = beta[ch];
      const T* s = x.ptr() + ch * hw;
      T* d = y.ptr() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) d[i] = static_cast<T>((s[i] - mean) * rstd * ga + be);
    }
  }
  return y;
}

template <typename T>
void group_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, std::size_t groups,
                         const NormStats& st, const Tensor<T>& dy, Tensor<T>* dx,
                         Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const std::size_t cg = c / groups, n = cg * hw;
  for (std::size_t g = 0; g < groups; ++g) {
    const double mean = st.mean[g], rstd = st.rstd[g];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t cc = 0; cc < cg; ++cc) {
      const std::size_t ch = g * cg + cc;
      const T* xs = x.ptr() + ch * hw;
      const T* dys = dy.ptr() + ch * hw;
      double dga = 0.0, dbe = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xhat = (xs[i] - mean) * rstd;
        dga += dys[i] * xhat;
        dbe += dys[i];
        const double dxhat = dys[i] * static_cast<double>(gamma[ch]);
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
      }
      if (dgamma) (*dgamma)[ch] += static_cast<T>(dga);
      if (dbeta) (*dbeta)[ch] += static_cast<T>(dbe);
    }
    if (!dx) continue;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t cc = 0; cc < cg; ++cc) {
      const std::size_t ch = g * cg + cc;
      const T* xs = x.ptr() + ch * hw;
      const T* dys = dy.ptr() + ch * hw;
      T* dxs = dx->ptr() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xhat = (xs[i] - mean) * rstd;
        const double dxhat = dys[i] * static_cast<double>(gamma[ch]);
        dxs[i] += static_cast<T>(rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat));
      }
    }
  }
}

/// Layer normalization over the last axis of [N, D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                     NormStats* stats) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: affine size mismatch");
  Tensor<T> y(x.shape());
  NormStats local;
  NormStats& st = stats ? *stats : local;
  st.mean.assign(rows, 0.0);
  st.rstd.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = x.ptr() + r * d;
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) sum += s[i];
    const double mean = sum / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (s[i] - mean) * (s[i] - mean);
    const double rstd = 1.0 / std::sqrt(var / static_cast<double>(d) + eps);
    st.mean[r] = mean;
    st.rstd[r] = rstd;
    T* o = y.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) o[i] = static_cast<T>((s[i] - mean) * rstd * gamma[i] + beta[i]);
  }
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const NormStats& st,
                         const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xs = x.ptr() + r * d;
    const T* dys = dy.ptr() + r * d;
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double xhat = (xs[i] - st.mean[r]) * st.rstd[r];
      if (dgamma) (*dgamma)[i] += static_cast<T>(dys[i] * xhat);
      if (dbeta) (*dbeta)[i] += dys[i];
      const double dxhat = dys[i] * static_cast<double>(gamma[i]);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    if (!dx) continue;
    T* dxs = dx->ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double xhat = (xs[i] - st.mean[r]) * st.rstd[r];
      const double dxhat = dys[i] * static_cast<double>(gamma[i]);
      dxs[i] += static_cast<T>(st.rstd[r] * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat));
    }
  }
}

// ---------------------------------------------------------------------------
// Softmax.

/// Softmax along `axis`; each slice has its maximum subtracted first.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T m = x[base];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(static_cast<double>(x[base + j * inner] - m));
        y[base + j * inner] = static_cast<T>(e);
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] = static_cast<T>(y[base + j * inner] / z);
    }
  }
  return y;
}

/// dx = y * (dy - sum(dy * y)) per slice along `axis`.
template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis, Tensor<T>& dx) {
  const auto& s = y.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * y[base + j * inner];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        dx[idx] += static_cast<T>(y[idx] * (dy[idx] - dot));
      }
    }
  }
}

/// Row softmax of [N, S] restricted to columns with key_valid[j] != 0.
/// Masked columns get exactly zero weight. Throws if no column is valid.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& key_valid) {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (key_valid.size() != cols) throw ShapeError("masked_softmax_rows: mask length mismatch");
  if (std::none_of(key_valid.begin(), key_valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw std::invalid_argument("attention has no valid keys (all positions are PAD)");
  }
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = x.ptr() + r * cols;
    T* o = y.ptr() + r * cols;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (key_valid[j]) m = std::max(m, s[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!key_valid[j]) continue;
      const double e = std::exp(static_cast<double>(s[j] - m));
      o[j] = static_cast<T>(e);
      z += e;
    }
    for (std::size_t j = 0; j < cols; ++j)
      if (key_valid[j]) o[j] = static_cast<T>(o[j] / z);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Resampling.

/// Bilinear upsampling of [C, h, w] to [C, H, W] on a corner-aligned grid:
/// output row i samples source coordinate i * (h - 1) / (H - 1) (0 when H == 1),
/// likewise for columns. Corners map to corners exactly.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw ShapeError("upsample_bilinear: expected [C,h,w], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < h || out_w < w) {
    throw std::invalid_argument("upsample_bilinear: downscale request " + shape_str(x.shape()) +
                                " -> " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  auto coords = [](std::size_t src, std::size_t dst) {
    std::vector<std::pair<std::size_t, double>> out(dst);
    for (std::size_t i = 0; i < dst; ++i) {
      const double pos = dst == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(src - 1) /
                                              static_cast<double>(dst - 1);
      std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
      if (i0 >= src - 1) i0 = src > 1 ? src - 2 : 0;
      out[i] = {i0, src > 1 ? pos - static_cast<double>(i0) : 0.0};
    }
    return out;
  };
  const auto ys = coords(h, out_h);
  const auto xs = coords(w, out_w);
  // Separable: rows are interpolated horizontally once, then blended vertically.
  Tensor<T> y(Shape{c, out_h, out_w});
  std::vector<double> rows(h * out_w);
  const T* src = x.ptr();
  T* dst = y.ptr();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = src + ch * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      const T* in = plane + r * w;
      double* out = rows.data() + r * out_w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto [x0, fx] = xs[j];
        const std::size_t x1 = w > 1 ? x0 + 1 : x0;
        out[j] = std::lerp<double>(in[x0], in[x1], fx);
      }
    }
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto [y0, fy] = ys[i];
      const std::size_t y1 = h > 1 ? y0 + 1 : y0;
      const double* top = rows.data() + y0 * out_w;
      const double* bot = rows.data() + y1 * out_w;
      for (std::size_t j = 0; j < out_w; ++j) *dst++ = static_cast<T>(std::lerp(top[j], bot[j], fy));
    }
  }
  return y;
}

}  // namespace ftd::kernels
