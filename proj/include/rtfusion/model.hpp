#pragma once

#include <cstdint>
#include <string>

#include "rtfusion/backbone.hpp"
#include "rtfusion/config.hpp"
#include "rtfusion/decoder.hpp"
#include "rtfusion/egfusion.hpp"
#include "rtfusion/params.hpp"

namespace rtfusion {

inline const std::string kRgbPrefix = "rgb.";
inline const std::string kThrPrefix = "thr.";

inline LevelGeometry low_level(const ModelConfig& c) {
  return {c.rgb_encoder.stage_widths[1], c.height / 8, c.width / 8};
}
inline LevelGeometry high_level(const ModelConfig& c) {
  return {c.rgb_encoder.stage_widths[3], c.height / 32, c.width / 32};
}
inline std::int64_t fused_channels(const ModelConfig& c) {
  return c.rgb_encoder.stage_widths[1] + c.rgb_encoder.stage_widths[3];
}
inline std::int64_t skip_channels(const ModelConfig& c) {
  return c.modality == Modality::thr_only ? c.thr_encoder.stage_widths[0] : c.rgb_encoder.stage_widths[0];
}

/// All learnable parameters in a fixed order: RGB encoder, THR encoder, the
/// two fusion levels, decoder. Both encoders exist in every modality.
inline ParamStore<float> build_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore<float> ps;
  Rng rng(mix_seed(cfg.seed, 0x1417));
  add_encoder_params(ps, kRgbPrefix, cfg.rgb_encoder, rng);
  add_encoder_params(ps, kThrPrefix, cfg.thr_encoder, rng);
  const FusionConfig fusion = cfg.effective_fusion();
  add_fusion_level_params(ps, kFusionLow, low_level(cfg), fusion, rng);
  add_fusion_level_params(ps, kFusionHigh, high_level(cfg), fusion, rng);
  add_decoder_params(ps, fused_channels(cfg), skip_channels(cfg), cfg.decoder, rng);
  return ps;
}

inline std::int64_t model_param_count(const ModelConfig& cfg) {
  const FusionConfig fusion = cfg.effective_fusion();
  return encoder_param_count(cfg.rgb_encoder) + encoder_param_count(cfg.thr_encoder) +
         fusion_level_param_count(low_level(cfg), fusion) + fusion_level_param_count(high_level(cfg), fusion) +
         decoder_param_count(fused_channels(cfg), skip_channels(cfg), cfg.decoder);
}

namespace detail {

template <typename T>
FeaturePair<T> zeros_like(const FeaturePair<T>& p) {
  return {Tensor<T>(p.low.shape()), Tensor<T>(p.high.shape())};
}

}  // namespace detail

/// rgb (N,3,H,W) + thr (N,1,Ht,Wt) -> depth (N,1,H,W).
///
/// fused: both encoders, THR aligned to the RGB grids, fused, decoded with the
/// RGB 1/4 skip. rgb_only: the THR stream is replaced by zeros. thr_only: the
/// aligned THR features become the primary stream, zeros the secondary, and
/// the THR 1/4 feature is resized to the RGB 1/4 grid as the skip.
template <typename T>
Tensor<T> forward(const Tensor<T>& rgb, const Tensor<T>& thr, const ParamStore<T>& ps, const ModelConfig& cfg) {
  if (rgb.shape().c != 3 || rgb.shape().h != cfg.height || rgb.shape().w != cfg.width) {
    throw ShapeError("forward: rgb shape " + rgb.shape().str() + " does not match config (N,3," +
                     std::to_string(cfg.height) + "," + std::to_string(cfg.width) + ")");
  }
  const FusionConfig fusion = cfg.effective_fusion();
  FeaturePair<T> primary, secondary;
  Tensor<T> skip;
  const auto check_thr = [&] {
    if (thr.shape().c != 1 || thr.shape().n != rgb.shape().n || thr.shape().h != cfg.thr_height ||
        thr.shape().w != cfg.thr_width) {
      throw ShapeError("forward: thr shape " + thr.shape().str() + " does not match config (" +
                       std::to_string(rgb.shape().n) + ",1," + std::to_string(cfg.thr_height) + "," +
                       std::to_string(cfg.thr_width) + ")");
    }
  };
  switch (cfg.modality) {
    case Modality::fused: {
      check_thr();
      const auto r = encode(rgb, ps, kRgbPrefix, cfg.rgb_encoder);
      const auto t = encode(thr, ps, kThrPrefix, cfg.thr_encoder);
      primary = r.pair;
      secondary = align_thr(t.pair, r.pair);
      skip = r.quarter;
      break;
    }
    case Modality::rgb_only: {
      const auto r = encode(rgb, ps, kRgbPrefix, cfg.rgb_encoder);
      primary = r.pair;
      secondary = detail::zeros_like(primary);
      skip = r.quarter;
      break;
    }
    case Modality::thr_only: {
      check_thr();
      const auto t = encode(thr, ps, kThrPrefix, cfg.thr_encoder);
      primary = {ops::bilinear_interp(t.pair.low, cfg.height / 8, cfg.width / 8),
                 ops::bilinear_interp(t.pair.high, cfg.height / 32, cfg.width / 32)};
      secondary = detail::zeros_like(primary);
      skip = ops::bilinear_interp(t.quarter, cfg.height / 4, cfg.width / 4);
      break;
    }
  }
  const Tensor<T> f_concat = fuse_all(primary, secondary, ps, fusion);
  return decode(f_concat, skip, ps, cfg.decoder);
}

}  // namespace rtfusion
