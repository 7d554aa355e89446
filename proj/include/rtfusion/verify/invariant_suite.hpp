#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "rtfusion/decoder.hpp"
#include "rtfusion/egfusion.hpp"
#include "rtfusion/metrics.hpp"
#include "rtfusion/model.hpp"
#include "rtfusion/verify/fixtures.hpp"
#include "rtfusion/verify/metric_suite.hpp"
#include "rtfusion/verify/suite.hpp"

namespace rtfusion::verify {

inline constexpr int kInvariantDraws = 10000;
inline constexpr double kRowSumTolerance = 1e-6;

namespace detail {

// Multiplies every parameter by a log-uniform gain in [1, 50], spanning the
// init scale (std 0.02) up to unit-scale weights.
inline void random_gain(ParamStore<float>& ps, Rng& rng) {
  const double gain = std::exp(rng.uniform(0.0, std::log(50.0)));
  for (auto& t : ps.tensors())
    for (auto& v : t.data_mut()) v = static_cast<float>(v * gain);
}

inline std::string fmt_count(const char* what, long bad, long total, double worst) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld/%ld %s violated, worst %.3e", bad, total, what, worst);
  return buf;
}

}  // namespace detail

/// Attention rows, learned edge maps, delta ordering and the depth range over
/// `draws` random draws each, in the f32 precision used for training.
inline SuiteReport invariant_suite(int draws = kInvariantDraws) {
  return run_suite("invariants", [draws](SuiteReport& rep) {
    Rng rng(314159);
    long row_bad = 0, rows = 0, edge_bad = 0, edges = 0;
    double row_worst = 0.0, edge_closest = 1.0;
    for (int d = 0; d < draws; ++d) {
      const std::int64_t c = rng.uniform_int(1, 8), h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
      ParamStore<float> ps;
      add_fusion_level_params(ps, "lvl.", LevelGeometry{c, h, w}, FusionConfig{}, rng);
      detail::random_gain(ps, rng);
      const double scale = std::exp(rng.uniform(std::log(0.1), std::log(10.0)));
      const auto f_rgb = random_tensor<float>(Shape{rng.uniform_int(1, 2), c, h, w}, rng, -scale, scale);
      const auto f_thr = random_tensor<float>(f_rgb.shape(), rng, -scale, scale);
      NoGradGuard guard;
      const auto [rgb_hat, thr_hat] = add_pe(f_rgb, f_thr, ps.get("lvl.pe"));
      const auto att = mca_forward(rgb_hat, thr_hat, McaParams<float>::from(ps, "lvl.mca.")).attention;
      const Shape& as = att.shape();
      for (std::int64_t n = 0; n < as.n; ++n)
        for (std::int64_t i = 0; i < as.h; ++i) {
          double sum = 0.0;
          bool nonneg = true;
          for (std::int64_t j = 0; j < as.w; ++j) {
            sum += att.at(n, 0, i, j);
            nonneg = nonneg && att.at(n, 0, i, j) >= 0.0f;
          }
          const double err = std::abs(sum - 1.0);
          row_worst = std::max(row_worst, err);
          row_bad += (err <= kRowSumTolerance && nonneg) ? 0 : 1;
          ++rows;
        }
      const auto e = learned_edge_map(thr_hat, EsemParams<float>::from(ps, "lvl.esem."));
      for (float v : e.data()) {
        edge_closest = std::min({edge_closest, static_cast<double>(v), 1.0 - static_cast<double>(v)});
        edge_bad += (v > 0.0f && v < 1.0f) ? 0 : 1;
        ++edges;
      }
    }
    rep.add("attention rows sum to 1 within 1e-6 (" + std::to_string(draws) + " draws)", row_bad == 0,
            detail::fmt_count("rows", row_bad, rows, row_worst));
    rep.add("learned edge map strictly inside (0,1) (" + std::to_string(draws) + " draws)", edge_bad == 0,
            detail::fmt_count("values", edge_bad, edges, edge_closest) + " (closest distance to 0 or 1)");

    long order_bad = 0;
    for (int d = 0; d < draws; ++d) {
      const auto c = random_metric_case(rng);
      const auto r = evaluate(c.pred, c.gt, c.mask);
      order_bad += (0.0 <= r.delta1 && r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0) ? 0 : 1;
    }
    rep.add("0 <= delta1 <= delta2 <= delta3 <= 1 (" + std::to_string(draws) + " draws)", order_bad == 0,
            std::to_string(order_bad) + " violations");

    // Decoder head over logits spanning many orders of magnitude, plus a
    // smaller number of complete forward passes at random parameter scales.
    const DecoderConfig dec;
    long range_bad = 0, range_total = 0;
    for (int d = 0; d < draws; ++d) {
      const double mag = std::pow(10.0, rng.uniform(-2.0, 4.0));
      const auto logits = random_tensor<float>(Shape{1, 1, 4, 4}, rng, -mag, mag);
      NoGradGuard guard;
      const auto depth = depth_from_logits(logits, dec);
      for (float v : depth.data()) {
        range_bad += (v >= dec.d_min && v <= dec.d_max) ? 0 : 1;
        ++range_total;
      }
    }
    const int model_draws = std::max(1, draws / 200);
    for (int d = 0; d < model_draws; ++d) {
      ModelConfig cfg;
      cfg.height = cfg.width = cfg.thr_height = cfg.thr_width = 32;
      cfg.rgb_encoder.stage_widths = cfg.thr_encoder.stage_widths = {8, 16, 16, 32};
      cfg.decoder.stage_widths = {16, 8, 8};
      cfg.modality = static_cast<Modality>(d % 3);
      cfg.seed = static_cast<std::uint64_t>(d);
      auto ps = build_params(cfg);
      for (auto& t : ps.tensors())
        for (auto& v : t.data_mut()) v = static_cast<float>(v * std::exp(rng.uniform(0.0, std::log(50.0))));
      const auto rgb = random_tensor<float>(Shape{1, 3, 32, 32}, rng, 0.0, 1.0);
      const auto thr = random_tensor<float>(Shape{1, 1, 32, 32}, rng, 0.0, 1.0);
      NoGradGuard guard;
      const auto depth = forward(rgb, thr, ps, cfg);
      for (float v : depth.data()) {
        range_bad += (v >= cfg.decoder.d_min && v <= cfg.decoder.d_max) ? 0 : 1;
        ++range_total;
      }
    }
    rep.add("depth output inside [d_min, d_max] (" + std::to_string(draws) + " head draws, " +
                std::to_string(model_draws) + " full-model draws)",
            range_bad == 0, std::to_string(range_bad) + "/" + std::to_string(range_total) + " pixels out of range");
  });
}

}  // namespace rtfusion::verify
