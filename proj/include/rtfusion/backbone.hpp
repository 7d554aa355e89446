#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "rtfusion/ops.hpp"
#include "rtfusion/params.hpp"

namespace rtfusion {

struct EncoderConfig {
  int in_channels = 3;
  std::array<int, 4> stage_widths{16, 32, 64, 128};
  std::array<int, 4> stage_depths{1, 1, 1, 1};
  int stem_stride = 4;

  void validate() const {
    if (in_channels < 1) throw ShapeError("encoder in_channels must be >= 1");
    if (stem_stride != 4) throw ShapeError("encoder stem_stride must be 4");
    for (int i = 0; i < 4; ++i) {
      if (stage_widths[static_cast<std::size_t>(i)] < 1) throw ShapeError("encoder stage widths must be >= 1");
      if (stage_depths[static_cast<std::size_t>(i)] < 1) throw ShapeError("encoder stage depths must be >= 1");
    }
  }
  /// Total downsampling factor from input to the deepest stage.
  static constexpr int kReduction = 32;
};

/// Mid-level (1/8) and deep (1/32) encoder features.
template <typename T>
struct FeaturePair {
  Tensor<T> low;
  Tensor<T> high;
};

template <typename T>
struct EncoderFeatures {
  Tensor<T> quarter;  // stage-1 output at 1/4 resolution; decoder skip source
  FeaturePair<T> pair;
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kNormEps = 1e-6;

namespace detail {

inline std::string stage_key(const std::string& prefix, int stage, int block, const char* leaf) {
  return prefix + "stages." + std::to_string(stage) + "." + std::to_string(block) + "." + leaf;
}

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, Shape weight_shape, Rng& rng) {
  ps.add_trunc_normal(name + ".weight", weight_shape, kInitStd, rng);
  ps.add_zeros(name + ".bias", Shape{1, weight_shape.n, 1, 1});
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, std::int64_t channels) {
  ps.add_constant(name + ".weight", Shape{1, channels, 1, 1}, T(1));
  ps.add_zeros(name + ".bias", Shape{1, channels, 1, 1});
}

template <typename T>
Tensor<T> conv(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x,
               std::int64_t stride = 1, std::int64_t padding = 0, std::int64_t groups = 1) {
  return ops::conv2d(x, ps.get(name + ".weight"), ps.get(name + ".bias"), stride, padding, groups);
}

template <typename T>
Tensor<T> norm(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return ops::layer_norm(x, ps.get(name + ".weight"), ps.get(name + ".bias"), static_cast<T>(kNormEps));
}

}  // namespace detail

/// Registers one encoder's parameters under `prefix` (e.g. "rgb.").
///
/// Layout (ConvNeXt): stem = 4x4/4 conv + norm; stage s >= 1 opens with a
/// downsampler (norm + 2x2/2 conv); each block is a 7x7 depthwise conv, norm,
/// 1x1 expansion to 4C, gelu, 1x1 projection back to C, and a residual add.
template <typename T>
void add_encoder_params(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto& w = cfg.stage_widths;
  detail::add_conv(ps, prefix + "stem.conv", Shape{w[0], cfg.in_channels, 4, 4}, rng);
  detail::add_norm<T>(ps, prefix + "stem.norm", w[0]);
  for (int s = 0; s < 4; ++s) {
    const std::int64_t c = w[static_cast<std::size_t>(s)];
    if (s > 0) {
      const std::int64_t prev = w[static_cast<std::size_t>(s - 1)];
      const std::string down = prefix + "down." + std::to_string(s);
      detail::add_norm<T>(ps, down + ".norm", prev);
      detail::add_conv(ps, down + ".conv", Shape{c, prev, 2, 2}, rng);
    }
    for (int b = 0; b < cfg.stage_depths[static_cast<std::size_t>(s)]; ++b) {
      detail::add_conv(ps, detail::stage_key(prefix, s, b, "dw"), Shape{c, 1, 7, 7}, rng);
      detail::add_norm<T>(ps, detail::stage_key(prefix, s, b, "norm"), c);
      detail::add_conv(ps, detail::stage_key(prefix, s, b, "pw1"), Shape{4 * c, c, 1, 1}, rng);
      detail::add_conv(ps, detail::stage_key(prefix, s, b, "pw2"), Shape{c, 4 * c, 1, 1}, rng);
    }
  }
}

/// Closed-form parameter count of one encoder.
inline std::int64_t encoder_param_count(const EncoderConfig& cfg) {
  const auto& w = cfg.stage_widths;
  std::int64_t total = static_cast<std::int64_t>(w[0]) * cfg.in_channels * 16 + w[0] + 2 * w[0];
  for (int s = 0; s < 4; ++s) {
    const std::int64_t c = w[static_cast<std::size_t>(s)];
    if (s > 0) {
      const std::int64_t prev = w[static_cast<std::size_t>(s - 1)];
      total += 2 * prev + c * prev * 4 + c;
    }
    const std::int64_t block = (49 * c + c) + 2 * c + (4 * c * c + 4 * c) + (4 * c * c + c);
    total += block * cfg.stage_depths[static_cast<std::size_t>(s)];
  }
  return total;
}

template <typename T>
Tensor<T> convnext_block(const ParamStore<T>& ps, const std::string& prefix, int stage, int block,
                         const Tensor<T>& x) {
  const std::int64_t c = x.shape().c;
  Tensor<T> y = detail::conv(ps, detail::stage_key(prefix, stage, block, "dw"), x, 1, 3, c);
  y = detail::norm(ps, detail::stage_key(prefix, stage, block, "norm"), y);
  y = ops::gelu(detail::conv(ps, detail::stage_key(prefix, stage, block, "pw1"), y));
  y = detail::conv(ps, detail::stage_key(prefix, stage, block, "pw2"), y);
  return ops::add(x, y);
}

template <typename T>
Tensor<T> encoder_downsample(const ParamStore<T>& ps, const std::string& prefix, int stage, const Tensor<T>& x) {
  const std::string down = prefix + "down." + std::to_string(stage);
  return detail::conv(ps, down + ".conv", detail::norm(ps, down + ".norm", x), 2, 0);
}

/// Runs one encoder. Input height and width must be multiples of 32.
template <typename T>
EncoderFeatures<T> encode(const Tensor<T>& x, const ParamStore<T>& ps, const std::string& prefix,
                          const EncoderConfig& cfg) {
  const Shape& s = x.shape();
  if (s.c != cfg.in_channels) {
    throw ShapeError("encode: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(s.c));
  }
  if (s.h % EncoderConfig::kReduction != 0 || s.w % EncoderConfig::kReduction != 0) {
    throw ShapeError("encode: input spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " must be a multiple of 32 in each dimension");
  }
  Tensor<T> h = detail::norm(ps, prefix + "stem.norm", detail::conv(ps, prefix + "stem.conv", x, 4, 0));
  EncoderFeatures<T> out;
  for (int stage = 0; stage < 4; ++stage) {
    if (stage > 0) h = encoder_downsample(ps, prefix, stage, h);
    for (int b = 0; b < cfg.stage_depths[static_cast<std::size_t>(stage)]; ++b) {
      h = convnext_block(ps, prefix, stage, b, h);
    }
    if (stage == 0) out.quarter = h;
    if (stage == 1) out.pair.low = h;
    if (stage == 3) out.pair.high = h;
  }
  return out;
}

template <typename T>
Tensor<T> resize_to(const Tensor<T>& x, const Tensor<T>& reference) {
  return ops::bilinear_interp(x, reference.shape().h, reference.shape().w);
}

/// Resizes THR features to the RGB feature grids.
template <typename T>
FeaturePair<T> align_thr(const FeaturePair<T>& thr, const FeaturePair<T>& rgb) {
  return FeaturePair<T>{resize_to(thr.low, rgb.low), resize_to(thr.high, rgb.high)};
}

}  // namespace rtfusion
