#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "rtfusion/errors.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion {

/// Turbo-like ramp as nine RGB anchors at t = 0, 1/8, ..., 1, linearly
/// interpolated. t = 0 is dark blue (near), t = 1 dark red (far).
inline constexpr std::array<std::array<unsigned char, 3>, 9> kDepthRamp{{
    {48, 18, 59},
    {65, 105, 225},
    {40, 170, 240},
    {30, 225, 180},
    {120, 250, 80},
    {200, 235, 50},
    {250, 180, 40},
    {230, 90, 20},
    {122, 4, 3},
}};

inline std::array<float, 3> ramp_color(double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double x = t * static_cast<double>(kDepthRamp.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(x), kDepthRamp.size() - 2);
  const double f = x - static_cast<double>(i);
  std::array<float, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    const double v = (1.0 - f) * kDepthRamp[i][c] + f * kDepthRamp[i + 1][c];
    out[c] = static_cast<float>(v / 255.0);
  }
  return out;
}

/// (1,1,H,W) depth -> (1,3,H,W) color with depth mapped linearly from
/// [d_min, d_max] onto the ramp.
inline Tensor<float> colorize_depth(const Tensor<float>& depth, double d_min, double d_max) {
  const Shape& s = depth.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("colorize_depth expects (1,1,H,W), got " + s.str());
  if (!(d_max > d_min)) throw ShapeError("colorize_depth: d_max must exceed d_min");
  Tensor<float> out(Shape{1, 3, s.h, s.w});
  auto o = out.data_mut();
  const auto plane = static_cast<std::size_t>(s.plane());
  for (std::size_t p = 0; p < plane; ++p) {
    const auto rgb = ramp_color((depth.data()[p] - d_min) / (d_max - d_min));
    for (std::size_t c = 0; c < 3; ++c) o[c * plane + p] = rgb[c];
  }
  return out;
}

}  // namespace rtfusion
