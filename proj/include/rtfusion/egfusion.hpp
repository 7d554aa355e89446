#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rtfusion/backbone.hpp"
#include "rtfusion/ops.hpp"
#include "rtfusion/params.hpp"

namespace rtfusion {

enum class FusionMode { egfusion, concat };
enum class EsemMode { learned, sobel, none };

struct FusionConfig {
  FusionMode mode = FusionMode::egfusion;
  bool mca_enabled = true;
  EsemMode esem_mode = EsemMode::learned;
  int attn_downsample_stride = 2;
};

/// Grid of one fusion level: channels and the RGB feature map size.
struct LevelGeometry {
  std::int64_t channels;
  std::int64_t height;
  std::int64_t width;
};

template <typename T>
struct McaParams {
  Tensor<T> q_w, q_b;            // 1x1, C -> C
  Tensor<T> kv_w, kv_b;          // 1x1, C -> 2C (K then V)
  Tensor<T> q_down_w, q_down_b;  // 3x3 stride s, C -> C
  Tensor<T> kv_down_w, kv_down_b;  // 3x3 stride s, 2 groups: K and V downsampled independently

  static McaParams from(const ParamStore<T>& ps, const std::string& prefix) {
    return McaParams{ps.get(prefix + "q.weight"),      ps.get(prefix + "q.bias"),
                     ps.get(prefix + "kv.weight"),     ps.get(prefix + "kv.bias"),
                     ps.get(prefix + "q_down.weight"), ps.get(prefix + "q_down.bias"),
                     ps.get(prefix + "kv_down.weight"), ps.get(prefix + "kv_down.bias")};
  }
};

template <typename T>
struct EsemParams {
  Tensor<T> w1_w, w1_b;  // 3x3, C -> C
  Tensor<T> w2_w, w2_b;  // 1x1, C -> 1

  static EsemParams from(const ParamStore<T>& ps, const std::string& prefix) {
    return EsemParams{ps.get(prefix + "w1.weight"), ps.get(prefix + "w1.bias"), ps.get(prefix + "w2.weight"),
                      ps.get(prefix + "w2.bias")};
  }
};

template <typename T>
void add_fusion_level_params(ParamStore<T>& ps, const std::string& prefix, const LevelGeometry& g,
                             const FusionConfig& cfg, Rng& rng) {
  const std::int64_t c = g.channels;
  if (cfg.mode == FusionMode::concat) {
    detail::add_conv(ps, prefix + "concat", Shape{c, 2 * c, 1, 1}, rng);
    return;
  }
  ps.add_trunc_normal(prefix + "pe", Shape{1, c, g.height, g.width}, kInitStd, rng);
  if (cfg.mca_enabled) {
    detail::add_conv(ps, prefix + "mca.q", Shape{c, c, 1, 1}, rng);
    detail::add_conv(ps, prefix + "mca.kv", Shape{2 * c, c, 1, 1}, rng);
    detail::add_conv(ps, prefix + "mca.q_down", Shape{c, c, 3, 3}, rng);
    detail::add_conv(ps, prefix + "mca.kv_down", Shape{2 * c, c, 3, 3}, rng);
  }
  if (cfg.esem_mode == EsemMode::learned) {
    detail::add_conv(ps, prefix + "esem.w1", Shape{c, c, 3, 3}, rng);
    detail::add_conv(ps, prefix + "esem.w2", Shape{1, c, 1, 1}, rng);
  }
  detail::add_conv(ps, prefix + "fuse.conv", Shape{c, c, 3, 3}, rng);
  detail::add_norm<T>(ps, prefix + "fuse.norm", c);
}

inline std::int64_t fusion_level_param_count(const LevelGeometry& g, const FusionConfig& cfg) {
  const std::int64_t c = g.channels;
  if (cfg.mode == FusionMode::concat) return 2 * c * c + c;
  std::int64_t total = c * g.height * g.width;
  if (cfg.mca_enabled) total += (c * c + c) + (2 * c * c + 2 * c) + (9 * c * c + c) + (18 * c * c + 2 * c);
  if (cfg.esem_mode == EsemMode::learned) total += (9 * c * c + c) + (c + 1);
  total += (9 * c * c + c) + 2 * c;
  return total;
}

/// F_hat = F + PE for both modalities, with the one PE tensor broadcast over the batch.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_pe(const Tensor<T>& f_rgb, const Tensor<T>& f_thr_aligned, const Tensor<T>& pe) {
  for (int d = 1; d < 4; ++d) {
    if (f_rgb.shape()[d] != pe.shape()[d]) ops::detail::mismatch("add_pe rgb", d, f_rgb.shape()[d], pe.shape()[d]);
    if (f_thr_aligned.shape()[d] != pe.shape()[d]) {
      ops::detail::mismatch("add_pe thr", d, f_thr_aligned.shape()[d], pe.shape()[d]);
    }
  }
  return {ops::add(f_rgb, pe), ops::add(f_thr_aligned, pe)};
}

template <typename T>
struct AttentionResult {
  Tensor<T> output;     // (N, C, h, w) on the downsampled grid
  Tensor<T> attention;  // (N, 1, L, L), rows indexed by RGB query tokens
};

/// Single-head attention over flattened spatial tokens:
/// A = softmax(Q K^T / sqrt(d_k)), O = A V, with d_k = C.
template <typename T>
AttentionResult<T> attend(const Tensor<T>& q_bar, const Tensor<T>& k_bar, const Tensor<T>& v_bar) {
  ops::detail::require_same_shape("attend key", q_bar, k_bar);
  ops::detail::require_same_shape("attend value", q_bar, v_bar);
  const Shape& s = q_bar.shape();
  const Tensor<T> q = ops::flatten_spatial(q_bar);
  const Tensor<T> k = ops::flatten_spatial(k_bar);
  const Tensor<T> v = ops::flatten_spatial(v_bar);
  const T scale = T(1) / std::sqrt(static_cast<T>(s.c));
  const Tensor<T> scores = ops::scalar_mul(ops::matmul(q, ops::transpose_hw(k)), scale);
  Tensor<T> a = ops::softmax_lastdim(scores);
  Tensor<T> o = ops::unflatten_spatial(ops::matmul(a, v), s.h, s.w);
  return AttentionResult<T>{std::move(o), std::move(a)};
}

template <typename T>
struct McaResult {
  Tensor<T> output;     // F_cross
  Tensor<T> attention;
  Tensor<T> v_bar;
};

/// Mutual complementary attention: RGB queries attend to THR keys/values on a
/// stride-downsampled grid; the upsampled result is added back to the RGB stream.
template <typename T>
McaResult<T> mca_forward(const Tensor<T>& f_rgb_hat, const Tensor<T>& f_thr_hat, const McaParams<T>& p,
                         int stride = 2) {
  ops::detail::require_same_shape("mca", f_rgb_hat, f_thr_hat);
  const Shape& s = f_rgb_hat.shape();
  const Tensor<T> q = ops::conv2d(f_rgb_hat, p.q_w, p.q_b);
  const Tensor<T> kv = ops::conv2d(f_thr_hat, p.kv_w, p.kv_b);
  const Tensor<T> q_bar = ops::conv2d(q, p.q_down_w, p.q_down_b, stride, 1);
  const Tensor<T> kv_bar = ops::conv2d(kv, p.kv_down_w, p.kv_down_b, stride, 1, 2);
  const Tensor<T> k_bar = ops::narrow(kv_bar, 1, 0, s.c);
  Tensor<T> v_bar = ops::narrow(kv_bar, 1, s.c, s.c);
  AttentionResult<T> att = attend(q_bar, k_bar, v_bar);
  const Tensor<T> o_hat = ops::bilinear_interp(att.output, s.h, s.w);
  return McaResult<T>{ops::add(f_rgb_hat, o_hat), std::move(att.attention), std::move(v_bar)};
}

template <typename T>
Tensor<T> mca(const Tensor<T>& f_rgb_hat, const Tensor<T>& f_thr_hat, const McaParams<T>& p, int stride = 2) {
  return mca_forward(f_rgb_hat, f_thr_hat, p, stride).output;
}

/// Learned edge gate E = sigmoid(W2 relu(W1 x)), one channel.
template <typename T>
Tensor<T> learned_edge_map(const Tensor<T>& f_thr_hat, const EsemParams<T>& p) {
  const Tensor<T> h = ops::relu(ops::conv2d(f_thr_hat, p.w1_w, p.w1_b, 1, 1));
  return ops::sigmoid(ops::conv2d(h, p.w2_w, p.w2_b));
}

/// Sobel gradient magnitude of the channel mean, min-max normalized per image
/// to [0, 1] (all zeros for a constant image). Borders replicate; the map is a
/// constant with respect to differentiation.
template <typename T>
Tensor<T> sobel_edge_map(const Tensor<T>& f_thr_hat) {
  const Shape& s = f_thr_hat.shape();
  const std::int64_t P = s.plane();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  auto od = out.data_mut();
  std::vector<double> m(static_cast<std::size_t>(P));
  std::vector<double> g(static_cast<std::size_t>(P));
  const auto data = f_thr_hat.data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::fill(m.begin(), m.end(), 0.0);
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t p = 0; p < P; ++p) m[static_cast<std::size_t>(p)] += data[static_cast<std::size_t>((n * s.c + c) * P + p)];
    }
    for (auto& v : m) v /= static_cast<double>(s.c);
    const auto at = [&](std::int64_t y, std::int64_t x) {
      y = std::clamp<std::int64_t>(y, 0, s.h - 1);
      x = std::clamp<std::int64_t>(x, 0, s.w - 1);
      return m[static_cast<std::size_t>(y * s.w + x)];
    };
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
        const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
        const double mag = std::sqrt(gx * gx + gy * gy);
        g[static_cast<std::size_t>(y * s.w + x)] = mag;
        lo = std::min(lo, mag);
        hi = std::max(hi, mag);
      }
    }
    for (std::int64_t p = 0; p < P; ++p) {
      const double v = hi > lo ? (g[static_cast<std::size_t>(p)] - lo) / (hi - lo) : 0.0;
      od[static_cast<std::size_t>(n * P + p)] = static_cast<T>(v);
    }
  }
  return out;
}

/// F_enhanced = F_cross + E * F_thr_hat, with E broadcast over channels.
/// `p` is only read in learned mode.
template <typename T>
Tensor<T> esem(const Tensor<T>& f_thr_hat, const Tensor<T>& f_cross, const EsemParams<T>* p, EsemMode mode) {
  ops::detail::require_same_shape("esem", f_cross, f_thr_hat);
  switch (mode) {
    case EsemMode::none:
      return f_cross;
    case EsemMode::sobel:
      return ops::add(f_cross, ops::mul(f_thr_hat, sobel_edge_map(f_thr_hat)));
    case EsemMode::learned:
      break;
  }
  if (p == nullptr) throw ShapeError("esem: learned mode requires parameters");
  return ops::add(f_cross, ops::mul(f_thr_hat, learned_edge_map(f_thr_hat, *p)));
}

/// 3x3 conv + layer norm + gelu, channel preserving.
template <typename T>
Tensor<T> fusion_conv(const ParamStore<T>& ps, const std::string& prefix, const Tensor<T>& x) {
  return ops::gelu(detail::norm(ps, prefix + "fuse.norm", detail::conv(ps, prefix + "fuse.conv", x, 1, 1)));
}

/// One fusion level. `prefix` addresses the level's parameters, e.g. "fusion.low.".
template <typename T>
Tensor<T> fuse_level(const Tensor<T>& f_rgb, const Tensor<T>& f_thr_aligned, const ParamStore<T>& ps,
                     const std::string& prefix, const FusionConfig& cfg) {
  ops::detail::require_same_shape("fuse_level", f_rgb, f_thr_aligned);
  if (cfg.mode == FusionMode::concat) {
    return detail::conv(ps, prefix + "concat", ops::concat_channels(f_rgb, f_thr_aligned));
  }
  auto [rgb_hat, thr_hat] = add_pe(f_rgb, f_thr_aligned, ps.get(prefix + "pe"));
  Tensor<T> cross = rgb_hat;
  if (cfg.mca_enabled) {
    cross = mca(rgb_hat, thr_hat, McaParams<T>::from(ps, prefix + "mca."), cfg.attn_downsample_stride);
  }
  Tensor<T> enhanced;
  if (cfg.esem_mode == EsemMode::learned) {
    const auto p = EsemParams<T>::from(ps, prefix + "esem.");
    enhanced = esem(thr_hat, cross, &p, cfg.esem_mode);
  } else {
    enhanced = esem<T>(thr_hat, cross, nullptr, cfg.esem_mode);
  }
  return fusion_conv(ps, prefix, enhanced);
}

inline const std::string kFusionLow = "fusion.low.";
inline const std::string kFusionHigh = "fusion.high.";

/// Fuses both levels and concatenates [low; upsampled high] at the low grid.
template <typename T>
Tensor<T> fuse_all(const FeaturePair<T>& rgb, const FeaturePair<T>& thr_aligned, const ParamStore<T>& ps,
                   const FusionConfig& cfg) {
  const Tensor<T> low = fuse_level(rgb.low, thr_aligned.low, ps, kFusionLow, cfg);
  const Tensor<T> high = fuse_level(rgb.high, thr_aligned.high, ps, kFusionHigh, cfg);
  return ops::concat_channels(low, resize_to(high, low));
}

}  // namespace rtfusion
