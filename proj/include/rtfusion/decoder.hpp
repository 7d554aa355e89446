#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "rtfusion/backbone.hpp"
#include "rtfusion/ops.hpp"
#include "rtfusion/params.hpp"

namespace rtfusion {

struct DecoderConfig {
  std::array<int, 3> stage_widths{64, 32, 16};
  bool skip_enabled = true;
  double d_min = 0.1;  // meters
  double d_max = 80.0;
  double head_init_std = 3.0;  // truncated-normal std of the 1x1 depth head weights

  void validate() const {
    if (!(head_init_std >= 0.0)) throw ShapeError("decoder head_init_std must be >= 0");
    if (!(d_min > 0.0)) throw ShapeError("decoder d_min must be > 0");
    if (!(d_max > d_min)) throw ShapeError("decoder d_max must exceed d_min");
    for (int w : stage_widths) {
      if (w < 1) throw ShapeError("decoder stage widths must be >= 1");
    }
  }
};

inline std::string decoder_stage(int i) { return "decoder.stages." + std::to_string(i); }

template <typename T>
void add_decoder_params(ParamStore<T>& ps, std::int64_t in_channels, std::int64_t skip_channels,
                        const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  std::int64_t prev = in_channels + (cfg.skip_enabled ? skip_channels : 0);
  for (int i = 0; i < 3; ++i) {
    const std::int64_t w = cfg.stage_widths[static_cast<std::size_t>(i)];
    detail::add_conv(ps, decoder_stage(i) + ".conv", Shape{w, prev, 3, 3}, rng);
    detail::add_norm<T>(ps, decoder_stage(i) + ".norm", w);
    prev = w;
  }
  ps.add_trunc_normal("decoder.head.weight", Shape{1, prev, 1, 1}, cfg.head_init_std, rng);
  ps.add_zeros("decoder.head.bias", Shape{1, 1, 1, 1});
}

inline std::int64_t decoder_param_count(std::int64_t in_channels, std::int64_t skip_channels,
                                        const DecoderConfig& cfg) {
  std::int64_t prev = in_channels + (cfg.skip_enabled ? skip_channels : 0);
  std::int64_t total = 0;
  for (int w : cfg.stage_widths) {
    total += 9 * prev * w + w + 2 * w;
    prev = w;
  }
  return total + prev + 1;
}

/// depth = d_min + softplus(x), clamped at d_max.
template <typename T>
Tensor<T> depth_from_logits(const Tensor<T>& x, const DecoderConfig& cfg) {
  return ops::clamp_max(ops::add_scalar(ops::softplus(x), static_cast<T>(cfg.d_min)), static_cast<T>(cfg.d_max));
}

/// Three x2 stages from the 1/8 grid to full resolution; the skip feature is
/// concatenated after the first upsample (1/4 grid).
template <typename T>
Tensor<T> decode(const Tensor<T>& f_concat, const Tensor<T>& skip, const ParamStore<T>& ps,
                 const DecoderConfig& cfg) {
  Tensor<T> h = f_concat;
  for (int i = 0; i < 3; ++i) {
    h = ops::bilinear_interp(h, 2 * h.shape().h, 2 * h.shape().w);
    if (i == 0 && cfg.skip_enabled) {
      if (!skip.defined()) throw ShapeError("decode: skip feature required when skip is enabled");
      if (skip.shape().h != h.shape().h) ops::detail::mismatch("decode skip", 2, skip.shape().h, h.shape().h);
      if (skip.shape().w != h.shape().w) ops::detail::mismatch("decode skip", 3, skip.shape().w, h.shape().w);
      h = ops::concat_channels(h, skip);
    }
    h = detail::conv(ps, decoder_stage(i) + ".conv", h, 1, 1);
    h = ops::gelu(detail::norm(ps, decoder_stage(i) + ".norm", h));
  }
  return depth_from_logits(detail::conv(ps, "decoder.head", h), cfg);
}

}  // namespace rtfusion
