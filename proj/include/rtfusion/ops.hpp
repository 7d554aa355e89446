#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "rtfusion/parallel.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion::ops {

namespace detail {

template <typename T>
Tensor<T> make_output(const Shape& shape, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->op = op;
  node->data.assign(static_cast<std::size_t>(shape.numel()), T(0));
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs) {
      if (in != nullptr && in->defined() && in->requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const Tensor<T>* in : inputs) {
        if (in != nullptr && in->defined()) node->inputs.push_back(in->node());
      }
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
bool tracks(const Tensor<T>& out) {
  return out.requires_grad();
}

[[noreturn]] inline void mismatch(const char* op, int dim, std::int64_t got, std::int64_t want) {
  throw ShapeError(std::string(op) + ": " + dim_name(dim) + " dimension mismatch (" +
                   std::to_string(got) + " vs " + std::to_string(want) + ")");
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  for (int d = 0; d < 4; ++d) {
    if (a.shape()[d] != b.shape()[d]) mismatch(op, d, b.shape()[d], a.shape()[d]);
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::int64_t batch, cin, h, w;
  std::int64_t cout, groups, cin_g, cout_g, kh, kw;
  std::int64_t stride, padding;
  std::int64_t out_h, out_w;

  std::int64_t patch() const { return cin_g * kh * kw; }
  std::int64_t positions() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1 && groups > 1; }
};

// Output columns [lo, hi) whose input column ox*stride - padding + k lies inside [0, w).
struct ValidSpan {
  std::int64_t lo, hi;
};

inline ValidSpan valid_span(std::int64_t out, std::int64_t in, std::int64_t stride, std::int64_t padding,
                            std::int64_t k) {
  const std::int64_t first = padding - k;  // smallest o with o*stride >= first
  std::int64_t lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const std::int64_t last = in - 1 + padding - k;  // largest o with o*stride <= last
  std::int64_t hi = last < 0 ? 0 : last / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Unfolds cin_g input planes into a (cin_g*kh*kw, out_h*out_w) matrix.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::int64_t positions = g.positions();
  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * positions;
        const ValidSpan xs = valid_span(g.out_w, g.w, g.stride, g.padding, kx);
        const std::int64_t shift = kx - g.padding;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * g.w + shift;
          std::fill(dst, dst + xs.lo, T(0));
          if (g.stride == 1) {
            std::copy(src + xs.lo, src + xs.hi, dst + xs.lo);
          } else {
            for (std::int64_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + xs.hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::int64_t positions = g.positions();
  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
    T* plane = dx + ci * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * positions;
        const ValidSpan xs = valid_span(g.out_w, g.w, g.stride, g.padding, kx);
        const std::int64_t shift = kx - g.padding;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + iy * g.w + shift;
          const T* src = row + oy * g.out_w;
          if (g.stride == 1) {
            for (std::int64_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::int64_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// Per-thread scratch that grows on demand and is never zeroed; callers
// overwrite every element they read.
template <typename T, int Slot>
T* scratch(std::size_t n) {
  thread_local Buffer<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* k, T* y) {
  for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
      T acc = T(0);
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const std::int64_t iy = oy * g.stride - g.padding + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t ix = ox * g.stride - g.padding + kx;
          if (ix < 0 || ix >= g.w) continue;
          acc += k[ky * g.kw + kx] * x[iy * g.w + ix];
        }
      }
      y[oy * g.out_w + ox] = acc;
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* k, const T* dy, T* dx,
                        T* dk) {
  for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
      const T go = dy[oy * g.out_w + ox];
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const std::int64_t iy = oy * g.stride - g.padding + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const std::int64_t ix = ox * g.stride - g.padding + kx;
          if (ix < 0 || ix >= g.w) continue;
          if (dx != nullptr) dx[iy * g.w + ix] += k[ky * g.kw + kx] * go;
          if (dk != nullptr) dk[ky * g.kw + kx] += x[iy * g.w + ix] * go;
        }
      }
    }
  }
}

// Per-axis bilinear taps under the half-pixel-center convention.
struct InterpTaps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

inline InterpTaps interp_taps(std::int64_t in, std::int64_t out) {
  InterpTaps taps;
  taps.lo.resize(static_cast<std::size_t>(out));
  taps.hi.resize(static_cast<std::size_t>(out));
  taps.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(src));
    const auto i = static_cast<std::size_t>(d);
    taps.lo[i] = lo;
    taps.hi[i] = std::min(lo + 1, in - 1);
    taps.frac[i] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. weight is (Cout, Cin/groups, kh, kw);
/// bias may be undefined or hold Cout values.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t padding = 0, std::int64_t groups = 1) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (groups < 1) throw ShapeError("conv2d: groups must be >= 1");
  if (xs.c != ws.c * groups) detail::mismatch("conv2d input", 1, xs.c, ws.c * groups);
  if (ws.n % groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(ws.n) +
                     " not divisible by groups " + std::to_string(groups));
  }
  if (bias.defined() && bias.numel() != ws.n) detail::mismatch("conv2d bias", 1, bias.numel(), ws.n);

  detail::ConvGeometry g{};
  g.batch = xs.n;
  g.cin = xs.c;
  g.h = xs.h;
  g.w = xs.w;
  g.cout = ws.n;
  g.groups = groups;
  g.cin_g = ws.c;
  g.cout_g = ws.n / groups;
  g.kh = ws.h;
  g.kw = ws.w;
  g.stride = stride;
  g.padding = padding;
  g.out_h = (xs.h + 2 * padding - ws.h) / stride + 1;
  g.out_w = (xs.w + 2 * padding - ws.w) / stride + 1;
  if (xs.h + 2 * padding < ws.h) detail::mismatch("conv2d kernel vs padded input", 2, ws.h, xs.h + 2 * padding);
  if (xs.w + 2 * padding < ws.w) detail::mismatch("conv2d kernel vs padded input", 3, ws.w, xs.w + 2 * padding);

  Tensor<T> out = detail::make_output<T>(Shape{g.batch, g.cout, g.out_h, g.out_w}, "conv2d",
                                         {&x, &weight, &bias});
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  T* yd = out.node()->data.data();
  const std::int64_t P = g.positions();
  const std::int64_t K = g.patch();

  parallel_for(g.batch, [&](std::int64_t n) {
    const bool unfold = !g.pointwise() && !g.depthwise();
    T* col = unfold ? detail::scratch<T, 0>(static_cast<std::size_t>(K * P)) : nullptr;
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = xd + (n * g.cin + grp * g.cin_g) * g.h * g.w;
      T* yg = yd + (n * g.cout + grp * g.cout_g) * P;
      const T* wg = wd + grp * g.cout_g * K;
      if (g.depthwise()) {
        detail::depthwise_forward(g, xg, wg, yg);
        continue;
      }
      const T* colp = xg;
      if (!g.pointwise()) {
        detail::im2col(g, xg, col);
        colp = col;
      }
      detail::MatMap<T>(yg, g.cout_g, P).noalias() =
          detail::ConstMatMap<T>(wg, g.cout_g, K) * detail::ConstMatMap<T>(colp, K, P);
    }
    if (bias.defined()) {
      const T* bd = bias.data().data();
      for (std::int64_t co = 0; co < g.cout; ++co) {
        T* plane = yd + (n * g.cout + co) * P;
        for (std::int64_t p = 0; p < P; ++p) plane[p] += bd[co];
      }
    }
  });

  if (detail::tracks(out)) {
    const bool has_bias = bias.defined();
    out.node()->backward_fn = [g, has_bias](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      Node<T>& wn = *self.inputs[1];
      const std::int64_t P = g.positions();
      const std::int64_t K = g.patch();
      const T* dy = self.grad.data();
      if (has_bias && self.inputs[2]->requires_grad) {
        Node<T>& bn = *self.inputs[2];
        bn.ensure_grad();
        for (std::int64_t n = 0; n < g.batch; ++n) {
          for (std::int64_t co = 0; co < g.cout; ++co) {
            const T* plane = dy + (n * g.cout + co) * P;
            T acc = T(0);
            for (std::int64_t p = 0; p < P; ++p) acc += plane[p];
            bn.grad[static_cast<std::size_t>(co)] += acc;
          }
        }
      }
      const bool need_dx = xn.requires_grad;
      const bool need_dw = wn.requires_grad;
      if (need_dx) xn.ensure_grad();
      // Per-sample weight gradients, reduced in batch order afterwards.
      Buffer<T> dw_parts;
      const std::int64_t wsize = static_cast<std::int64_t>(wn.data.size());
      if (need_dw) dw_parts.assign(static_cast<std::size_t>(g.batch * wsize), T(0));
      parallel_for(g.batch, [&](std::int64_t n) {
        const bool unfold = !g.pointwise() && !g.depthwise();
        T* col = unfold ? detail::scratch<T, 0>(static_cast<std::size_t>(K * P)) : nullptr;
        T* dcol = unfold ? detail::scratch<T, 1>(static_cast<std::size_t>(K * P)) : nullptr;
        T* dw_n = need_dw ? dw_parts.data() + n * wsize : nullptr;
        for (std::int64_t grp = 0; grp < g.groups; ++grp) {
          const T* xg = xn.data.data() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
          T* dxg = need_dx ? xn.grad.data() + (n * g.cin + grp * g.cin_g) * g.h * g.w : nullptr;
          const T* wg = wn.data.data() + grp * g.cout_g * K;
          T* dwg = need_dw ? dw_n + grp * g.cout_g * K : nullptr;
          const T* dyg = dy + (n * g.cout + grp * g.cout_g) * P;
          if (g.depthwise()) {
            detail::depthwise_backward(g, xg, wg, dyg, dxg, dwg);
            continue;
          }
          detail::ConstMatMap<T> dY(dyg, g.cout_g, P);
          detail::ConstMatMap<T> W(wg, g.cout_g, K);
          if (g.pointwise()) {
            if (need_dw) detail::MatMap<T>(dwg, g.cout_g, K).noalias() = dY * detail::ConstMatMap<T>(xg, K, P).transpose();
            if (need_dx) detail::MatMap<T>(dxg, K, P).noalias() += W.transpose() * dY;
            continue;
          }
          if (need_dw) {
            detail::im2col(g, xg, col);
            detail::MatMap<T>(dwg, g.cout_g, K).noalias() = dY * detail::ConstMatMap<T>(col, K, P).transpose();
          }
          if (need_dx) {
            detail::MatMap<T>(dcol, K, P).noalias() = W.transpose() * dY;
            detail::col2im_add(g, dcol, dxg);
          }
        }
      });
      if (need_dw) {
        wn.ensure_grad();
        for (std::int64_t n = 0; n < g.batch; ++n) {
          const T* part = dw_parts.data() + n * wsize;
          for (std::int64_t i = 0; i < wsize; ++i) wn.grad[static_cast<std::size_t>(i)] += part[i];
        }
      }
    };
  }
  return out;
}

/// Bilinear resize with src = (dst + 0.5) * in/out - 0.5, clamped to the grid.
template <typename T>
Tensor<T> bilinear_interp(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_interp: output size must be >= 1");
  const Shape& s = x.shape();
  Tensor<T> out = detail::make_output<T>(Shape{s.n, s.c, out_h, out_w}, "bilinear_interp", {&x});
  const bool identity = (out_h == s.h && out_w == s.w);
  const auto ty = detail::interp_taps(s.h, out_h);
  const auto tx = detail::interp_taps(s.w, out_w);
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  const std::int64_t planes = s.n * s.c;
  if (identity) {
    std::copy(xd, xd + s.numel(), yd);
  } else {
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* in = xd + p * s.h * s.w;
      T* o = yd + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto iy = static_cast<std::size_t>(oy);
        const T fy = static_cast<T>(ty.frac[iy]);
        const T* r0 = in + ty.lo[iy] * s.w;
        const T* r1 = in + ty.hi[iy] * s.w;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto ix = static_cast<std::size_t>(ox);
          const T fx = static_cast<T>(tx.frac[ix]);
          const T top = (T(1) - fx) * r0[tx.lo[ix]] + fx * r0[tx.hi[ix]];
          const T bot = (T(1) - fx) * r1[tx.lo[ix]] + fx * r1[tx.hi[ix]];
          o[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
        }
      }
    }
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [s, out_h, out_w, identity, ty, tx](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      const T* dy = self.grad.data();
      T* dx = xn.grad.data();
      if (identity) {
        for (std::int64_t i = 0; i < s.numel(); ++i) dx[i] += dy[i];
        return;
      }
      for (std::int64_t p = 0; p < s.n * s.c; ++p) {
        T* g = dx + p * s.h * s.w;
        const T* go = dy + p * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::size_t>(oy);
          const T fy = static_cast<T>(ty.frac[iy]);
          T* r0 = g + ty.lo[iy] * s.w;
          T* r1 = g + ty.hi[iy] * s.w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::size_t>(ox);
            const T fx = static_cast<T>(tx.frac[ix]);
            const T v = go[oy * out_w + ox];
            r0[tx.lo[ix]] += (T(1) - fy) * (T(1) - fx) * v;
            r0[tx.hi[ix]] += (T(1) - fy) * fx * v;
            r1[tx.lo[ix]] += fy * (T(1) - fx) * v;
            r1[tx.hi[ix]] += fy * fx * v;
          }
        }
      }
    };
  }
  return out;
}

/// Row-wise softmax over the width axis (the last dimension).
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out = detail::make_output<T>(s, "softmax", {&x});
  const std::int64_t rows = s.n * s.c * s.h;
  const std::int64_t cols = s.w;
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xd + r * cols;
    T* o = yd + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T sum = T(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::int64_t j = 0; j < cols; ++j) o[j] /= sum;
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [rows, cols](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * cols;
        const T* dy = self.grad.data() + r * cols;
        T* dx = xn.grad.data() + r * cols;
        T dot = T(0);
        for (std::int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        for (std::int64_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return out;
}

/// Batched matrix product over the trailing (h, w) axes: (N,C,m,k) x (N,C,k,n).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n != bs.n) detail::mismatch("matmul", 0, bs.n, as.n);
  if (as.c != bs.c) detail::mismatch("matmul", 1, bs.c, as.c);
  if (as.w != bs.h) detail::mismatch("matmul inner", 2, bs.h, as.w);
  const std::int64_t m = as.h, k = as.w, n = bs.w;
  Tensor<T> out = detail::make_output<T>(Shape{as.n, as.c, m, n}, "matmul", {&a, &b});
  const std::int64_t batches = as.n * as.c;
  for (std::int64_t i = 0; i < batches; ++i) {
    detail::MatMap<T>(out.node()->data.data() + i * m * n, m, n).noalias() =
        detail::ConstMatMap<T>(a.data().data() + i * m * k, m, k) *
        detail::ConstMatMap<T>(b.data().data() + i * k * n, k, n);
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [batches, m, k, n](Node<T>& self) {
      Node<T>& an = *self.inputs[0];
      Node<T>& bn = *self.inputs[1];
      if (an.requires_grad) an.ensure_grad();
      if (bn.requires_grad) bn.ensure_grad();
      for (std::int64_t i = 0; i < batches; ++i) {
        detail::ConstMatMap<T> dC(self.grad.data() + i * m * n, m, n);
        if (an.requires_grad) {
          detail::MatMap<T>(an.grad.data() + i * m * k, m, k).noalias() +=
              dC * detail::ConstMatMap<T>(bn.data.data() + i * k * n, k, n).transpose();
        }
        if (bn.requires_grad) {
          detail::MatMap<T>(bn.grad.data() + i * k * n, k, n).noalias() +=
              detail::ConstMatMap<T>(an.data.data() + i * m * k, m, k).transpose() * dC;
        }
      }
    };
  }
  return out;
}

/// Swaps the trailing two axes: (N,C,H,W) -> (N,C,W,H).
template <typename T>
Tensor<T> transpose_hw(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out = detail::make_output<T>(Shape{s.n, s.c, s.w, s.h}, "transpose_hw", {&x});
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  for (std::int64_t p = 0; p < s.n * s.c; ++p) {
    for (std::int64_t i = 0; i < s.h; ++i) {
      for (std::int64_t j = 0; j < s.w; ++j) yd[p * s.plane() + j * s.h + i] = xd[p * s.plane() + i * s.w + j];
    }
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [s](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      for (std::int64_t p = 0; p < s.n * s.c; ++p) {
        for (std::int64_t i = 0; i < s.h; ++i) {
          for (std::int64_t j = 0; j < s.w; ++j) {
            xn.grad[static_cast<std::size_t>(p * s.plane() + i * s.w + j)] +=
                self.grad[static_cast<std::size_t>(p * s.plane() + j * s.h + i)];
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

// b broadcasts against a when each of its extents equals a's or is 1.
struct Broadcast {
  Shape a;
  std::int64_t sn, sc, sh, sw;  // strides into b; 0 on broadcast axes
  bool same;

  Broadcast(const char* op, const Shape& as, const Shape& bs) : a(as) {
    for (int d = 0; d < 4; ++d) {
      if (bs[d] != as[d] && bs[d] != 1) mismatch(op, d, bs[d], as[d]);
    }
    same = (as == bs);
    sw = bs.w == 1 ? 0 : 1;
    sh = bs.h == 1 ? 0 : bs.w;
    sc = bs.c == 1 ? 0 : bs.h * bs.w;
    sn = bs.n == 1 ? 0 : bs.c * bs.h * bs.w;
  }

  template <typename Fn>
  void each(Fn&& fn) const {
    std::int64_t i = 0;
    for (std::int64_t n = 0; n < a.n; ++n) {
      for (std::int64_t c = 0; c < a.c; ++c) {
        for (std::int64_t h = 0; h < a.h; ++h) {
          const std::int64_t base = n * sn + c * sc + h * sh;
          for (std::int64_t w = 0; w < a.w; ++w, ++i) fn(i, same ? i : base + w * sw);
        }
      }
    }
  }
};

}  // namespace detail

/// a + b, where b may broadcast along size-1 axes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc("add", a.shape(), b.shape());
  Tensor<T> out = detail::make_output<T>(a.shape(), "add", {&a, &b});
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* yd = out.node()->data.data();
  bc.each([&](std::int64_t i, std::int64_t j) { yd[i] = ad[i] + bd[j]; });
  if (detail::tracks(out)) {
    out.node()->backward_fn = [bc](Node<T>& self) {
      Node<T>& an = *self.inputs[0];
      Node<T>& bn = *self.inputs[1];
      if (an.requires_grad) {
        an.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        bc.each([&](std::int64_t i, std::int64_t j) { bn.grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i)]; });
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc("sub", a.shape(), b.shape());
  Tensor<T> out = detail::make_output<T>(a.shape(), "sub", {&a, &b});
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* yd = out.node()->data.data();
  bc.each([&](std::int64_t i, std::int64_t j) { yd[i] = ad[i] - bd[j]; });
  if (detail::tracks(out)) {
    out.node()->backward_fn = [bc](Node<T>& self) {
      Node<T>& an = *self.inputs[0];
      Node<T>& bn = *self.inputs[1];
      if (an.requires_grad) {
        an.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        bc.each([&](std::int64_t i, std::int64_t j) { bn.grad[static_cast<std::size_t>(j)] -= self.grad[static_cast<std::size_t>(i)]; });
      }
    };
  }
  return out;
}

/// Elementwise a * b, where b may broadcast along size-1 axes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::Broadcast bc("mul", a.shape(), b.shape());
  Tensor<T> out = detail::make_output<T>(a.shape(), "mul", {&a, &b});
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* yd = out.node()->data.data();
  bc.each([&](std::int64_t i, std::int64_t j) { yd[i] = ad[i] * bd[j]; });
  if (detail::tracks(out)) {
    out.node()->backward_fn = [bc](Node<T>& self) {
      Node<T>& an = *self.inputs[0];
      Node<T>& bn = *self.inputs[1];
      if (an.requires_grad) an.ensure_grad();
      if (bn.requires_grad) bn.ensure_grad();
      bc.each([&](std::int64_t i, std::int64_t j) {
        const auto ui = static_cast<std::size_t>(i);
        const auto uj = static_cast<std::size_t>(j);
        if (an.requires_grad) an.grad[ui] += self.grad[ui] * bn.data[uj];
        if (bn.requires_grad) bn.grad[uj] += self.grad[ui] * an.data[ui];
      });
    };
  }
  return out;
}

namespace detail {

// Elementwise map y = f(x) with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  Tensor<T> out = make_output<T>(x.shape(), op, {&x});
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) yd[i] = f(xd[i]);
  if (tracks(out)) {
    out.node()->backward_fn = [df](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        xn.grad[i] += self.grad[i] * df(xn.data[i], self.data[i]);
      }
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scalar_mul", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Logistic function, evaluated without overflow. The result is kept inside
/// the open interval (0, 1): where it would round to 0 or 1 it is clamped to
/// the nearest representable value inside.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  static constexpr T lo = std::numeric_limits<T>::min();
  static constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return detail::unary(
      x, "sigmoid",
      [](T v) {
        T y;
        if (v >= T(0)) {
          y = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          y = e / (T(1) + e);
        }
        return std::clamp(y, lo, hi);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T c = static_cast<T>(0.044715);
  Tensor<T> out = detail::make_output<T>(x.shape(), "gelu", {&x});
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> v(x.data().data(), n);
  Eigen::Array<T, Eigen::Dynamic, 1> t = (k * (v + c * v.cube())).tanh();
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(out.node()->data.data(), n) = T(0.5) * v * (T(1) + t);
  if (detail::tracks(out)) {
    out.node()->backward_fn = [t = std::move(t)](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      const auto m = static_cast<Eigen::Index>(self.data.size());
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xv(xn.data.data(), m);
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> gy(self.grad.data(), m);
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(xn.grad.data(), m) +=
          gy * (T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t.square()) * k * (T(1) + T(3) * c * xv.square()));
    };
  }
  return out;
}

/// log(1 + e^x), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

/// |x| with subgradient 0 at 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

/// min(x, hi); gradient passes only where x < hi.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T hi) {
  return detail::unary(
      x, "clamp_max", [hi](T v) { return v > hi ? hi : v; },
      [hi](T v, T) { return v < hi ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = detail::make_output<T>(Shape{}, "sum", {&x});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.node()->data[0] = acc;
  if (detail::tracks(out)) {
    out.node()->backward_fn = [](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      const T g = self.grad[0];
      for (auto& v : xn.grad) v += g;
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scalar_mul(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Channel-wise layer normalization at each (n, h, w) position followed by a
/// per-channel affine map; gamma and beta hold C values each.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(1e-6)) {
  const Shape s = x.shape();
  if (gamma.numel() != s.c) detail::mismatch("layer_norm gamma", 1, gamma.numel(), s.c);
  if (beta.numel() != s.c) detail::mismatch("layer_norm beta", 1, beta.numel(), s.c);
  Tensor<T> out = detail::make_output<T>(s, "layer_norm", {&x, &gamma, &beta});
  const std::int64_t P = s.plane();
  std::vector<T> xhat(static_cast<std::size_t>(s.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(s.n * P));
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  T* yd = out.node()->data.data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    const std::int64_t base = n * s.c * P;
    for (std::int64_t p = 0; p < P; ++p) {
      T mu = T(0);
      for (std::int64_t c = 0; c < s.c; ++c) mu += xd[base + c * P + p];
      mu /= static_cast<T>(s.c);
      T var = T(0);
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T d = xd[base + c * P + p] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n * P + p)] = is;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const std::int64_t i = base + c * P + p;
        const T xh = (xd[i] - mu) * is;
        xhat[static_cast<std::size_t>(i)] = xh;
        yd[i] = xh * gd[c] + bd[c];
      }
    }
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [s, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      Node<T>& gn = *self.inputs[1];
      Node<T>& bn = *self.inputs[2];
      const std::int64_t P = s.plane();
      const T* dy = self.grad.data();
      if (gn.requires_grad) gn.ensure_grad();
      if (bn.requires_grad) bn.ensure_grad();
      if (xn.requires_grad) xn.ensure_grad();
      for (std::int64_t n = 0; n < s.n; ++n) {
        const std::int64_t base = n * s.c * P;
        for (std::int64_t p = 0; p < P; ++p) {
          T sum_g = T(0);
          T sum_gx = T(0);
          for (std::int64_t c = 0; c < s.c; ++c) {
            const auto i = static_cast<std::size_t>(base + c * P + p);
            const T g = dy[i] * gn.data[static_cast<std::size_t>(c)];
            sum_g += g;
            sum_gx += g * xhat[i];
            if (gn.requires_grad) gn.grad[static_cast<std::size_t>(c)] += dy[i] * xhat[i];
            if (bn.requires_grad) bn.grad[static_cast<std::size_t>(c)] += dy[i];
          }
          if (!xn.requires_grad) continue;
          const T is = inv_std[static_cast<std::size_t>(n * P + p)];
          const T inv_c = T(1) / static_cast<T>(s.c);
          for (std::int64_t c = 0; c < s.c; ++c) {
            const auto i = static_cast<std::size_t>(base + c * P + p);
            const T g = dy[i] * gn.data[static_cast<std::size_t>(c)];
            xn.grad[i] += is * (g - inv_c * sum_g - xhat[i] * inv_c * sum_gx);
          }
        }
      }
    };
  }
  return out;
}

/// Channel concatenation with a's channels first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n != bs.n) detail::mismatch("concat_channels", 0, bs.n, as.n);
  if (as.h != bs.h) detail::mismatch("concat_channels", 2, bs.h, as.h);
  if (as.w != bs.w) detail::mismatch("concat_channels", 3, bs.w, as.w);
  Tensor<T> out = detail::make_output<T>(Shape{as.n, as.c + bs.c, as.h, as.w}, "concat_channels", {&a, &b});
  const std::int64_t ablock = as.c * as.plane();
  const std::int64_t bblock = bs.c * bs.plane();
  T* yd = out.node()->data.data();
  for (std::int64_t n = 0; n < as.n; ++n) {
    std::copy_n(a.data().data() + n * ablock, ablock, yd + n * (ablock + bblock));
    std::copy_n(b.data().data() + n * bblock, bblock, yd + n * (ablock + bblock) + ablock);
  }
  if (detail::tracks(out)) {
    out.node()->backward_fn = [batch = as.n, ablock, bblock](Node<T>& self) {
      Node<T>& an = *self.inputs[0];
      Node<T>& bn = *self.inputs[1];
      if (an.requires_grad) an.ensure_grad();
      if (bn.requires_grad) bn.ensure_grad();
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* g = self.grad.data() + n * (ablock + bblock);
        if (an.requires_grad) {
          for (std::int64_t i = 0; i < ablock; ++i) an.grad[static_cast<std::size_t>(n * ablock + i)] += g[i];
        }
        if (bn.requires_grad) {
          for (std::int64_t i = 0; i < bblock; ++i) bn.grad[static_cast<std::size_t>(n * bblock + i)] += g[ablock + i];
        }
      }
    };
  }
  return out;
}

/// Sub-range [start, start + length) along one axis (0..3).
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int dim, std::int64_t start, std::int64_t length) {
  const Shape s = x.shape();
  if (dim < 0 || dim > 3) throw ShapeError("narrow: axis must be in [0, 3]");
  if (start < 0 || length < 1 || start + length > s[dim]) {
    throw ShapeError(std::string("narrow: range [") + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside " + dim_name(dim) + " extent " +
                     std::to_string(s[dim]));
  }
  Shape os = s;
  (dim == 0 ? os.n : dim == 1 ? os.c : dim == 2 ? os.h : os.w) = length;
  Tensor<T> out = detail::make_output<T>(os, "narrow", {&x});
  const auto src_index = [s, dim, start](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    switch (dim) {
      case 0: n += start; break;
      case 1: c += start; break;
      case 2: h += start; break;
      default: w += start; break;
    }
    return ((n * s.c + c) * s.h + h) * s.w + w;
  };
  const auto visit = [os, src_index](auto&& fn) {
    std::int64_t i = 0;
    for (std::int64_t n = 0; n < os.n; ++n)
      for (std::int64_t c = 0; c < os.c; ++c)
        for (std::int64_t h = 0; h < os.h; ++h)
          for (std::int64_t w = 0; w < os.w; ++w, ++i) fn(i, src_index(n, c, h, w));
  };
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  visit([&](std::int64_t i, std::int64_t j) { yd[i] = xd[j]; });
  if (detail::tracks(out)) {
    out.node()->backward_fn = [visit](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      visit([&](std::int64_t i, std::int64_t j) {
        xn.grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i)];
      });
    };
  }
  return out;
}

/// (N, C, H, W) -> (N, 1, H*W, C): one row per spatial position (token),
/// positions in row-major order, channels as the embedding.
template <typename T>
Tensor<T> flatten_spatial(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out = detail::make_output<T>(Shape{s.n, 1, s.plane(), s.c}, "flatten_spatial", {&x});
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  const std::int64_t P = s.plane();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t p = 0; p < P; ++p) yd[(n * P + p) * s.c + c] = xd[(n * s.c + c) * P + p];
  if (detail::tracks(out)) {
    out.node()->backward_fn = [s, P](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c)
          for (std::int64_t p = 0; p < P; ++p)
            xn.grad[static_cast<std::size_t>((n * s.c + c) * P + p)] +=
                self.grad[static_cast<std::size_t>((n * P + p) * s.c + c)];
    };
  }
  return out;
}

/// Inverse of flatten_spatial: (N, 1, H*W, C) -> (N, C, H, W).
template <typename T>
Tensor<T> unflatten_spatial(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  const Shape s = x.shape();
  if (s.c != 1) detail::mismatch("unflatten_spatial", 1, s.c, 1);
  if (s.h != h * w) detail::mismatch("unflatten_spatial tokens", 2, s.h, h * w);
  const std::int64_t C = s.w;
  const std::int64_t P = h * w;
  Tensor<T> out = detail::make_output<T>(Shape{s.n, C, h, w}, "unflatten_spatial", {&x});
  const T* xd = x.data().data();
  T* yd = out.node()->data.data();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t p = 0; p < P; ++p) yd[(n * C + c) * P + p] = xd[(n * P + p) * C + c];
  if (detail::tracks(out)) {
    out.node()->backward_fn = [batch = s.n, C, P](Node<T>& self) {
      Node<T>& xn = *self.inputs[0];
      xn.ensure_grad();
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t p = 0; p < P; ++p)
            xn.grad[static_cast<std::size_t>((n * P + p) * C + c)] +=
                self.grad[static_cast<std::size_t>((n * C + c) * P + p)];
    };
  }
  return out;
}

}  // namespace rtfusion::ops
