#pragma once

#include <cmath>
#include <cstdint>

#include "rtfusion/ops.hpp"

namespace rtfusion {

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.1;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ShapeError("loss weights must be >= 0");
  }
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> l1;
  Tensor<T> smooth;
};

/// Mean |pred - gt| over pixels where mask is 1.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& d_pred, const Tensor<T>& d_gt, const Tensor<T>& mask) {
  ops::detail::require_same_shape("l1_loss gt", d_pred, d_gt);
  ops::detail::require_same_shape("l1_loss mask", d_pred, mask);
  double valid = 0.0;
  for (T m : mask.data()) valid += static_cast<double>(m);
  if (!(valid > 0.0)) throw ShapeError("l1_loss: mask has no valid pixels");
  const Tensor<T> err = ops::mul(ops::abs(ops::sub(d_pred, d_gt)), mask);
  return ops::scalar_mul(ops::sum(err), static_cast<T>(1.0 / valid));
}

namespace detail {

// exp(-mean_c |I(p + step) - I(p)|) over the forward-difference grid along one axis.
template <typename T>
Tensor<T> edge_weights(const Tensor<T>& image, int axis) {
  const Shape s = image.shape();
  Shape ws{s.n, 1, s.h - (axis == 2 ? 1 : 0), s.w - (axis == 3 ? 1 : 0)};
  Tensor<T> out(ws);
  auto od = out.data_mut();
  for (std::int64_t n = 0; n < ws.n; ++n)
    for (std::int64_t y = 0; y < ws.h; ++y)
      for (std::int64_t x = 0; x < ws.w; ++x) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < s.c; ++c) {
          const double a = image.at(n, c, y, x);
          const double b = axis == 2 ? image.at(n, c, y + 1, x) : image.at(n, c, y, x + 1);
          acc += std::abs(b - a);
        }
        od[static_cast<std::size_t>((n * ws.h + y) * ws.w + x)] =
            static_cast<T>(std::exp(-acc / static_cast<double>(s.c)));
      }
  return out;
}

template <typename T>
Tensor<T> forward_difference(const Tensor<T>& x, int axis) {
  const std::int64_t len = x.shape()[axis] - 1;
  return ops::sub(ops::narrow(x, axis, 1, len), ops::narrow(x, axis, 0, len));
}

}  // namespace detail

/// Edge-aware smoothness: for each axis with at least one forward difference,
/// the mean of |dD| * exp(-|dI|), summed over the two axes.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& d_pred, const Tensor<T>& rgb) {
  const Shape& s = d_pred.shape();
  if (rgb.shape().n != s.n) ops::detail::mismatch("smoothness_loss image", 0, rgb.shape().n, s.n);
  if (rgb.shape().h != s.h) ops::detail::mismatch("smoothness_loss image", 2, rgb.shape().h, s.h);
  if (rgb.shape().w != s.w) ops::detail::mismatch("smoothness_loss image", 3, rgb.shape().w, s.w);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (int axis : {3, 2}) {
    if (s[axis] < 2) continue;
    const Tensor<T> term = ops::mul(ops::abs(detail::forward_difference(d_pred, axis)), detail::edge_weights(rgb, axis));
    total = ops::add(total, ops::mean(term));
  }
  return total;
}

template <typename T>
LossTerms<T> loss_terms(const Tensor<T>& d_pred, const Tensor<T>& d_gt, const Tensor<T>& mask, const Tensor<T>& rgb,
                        const LossWeights& w) {
  w.validate();
  Tensor<T> l1 = l1_loss(d_pred, d_gt, mask);
  Tensor<T> smooth = smoothness_loss(d_pred, rgb);
  Tensor<T> total =
      ops::add(ops::scalar_mul(l1, static_cast<T>(w.lambda1)), ops::scalar_mul(smooth, static_cast<T>(w.lambda2)));
  return LossTerms<T>{std::move(total), std::move(l1), std::move(smooth)};
}

/// lambda1 * L1 + lambda2 * smoothness.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& d_pred, const Tensor<T>& d_gt, const Tensor<T>& mask, const Tensor<T>& rgb,
                     const LossWeights& w) {
  return loss_terms(d_pred, d_gt, mask, rgb, w).total;
}

}  // namespace rtfusion
