#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rtfusion/config.hpp"
#include "rtfusion/egfusion.hpp"
#include "rtfusion/gradcheck.hpp"
#include "rtfusion/loss.hpp"
#include "rtfusion/model.hpp"
#include "rtfusion/verify/fixtures.hpp"
#include "rtfusion/verify/suite.hpp"

namespace rtfusion::verify {

inline constexpr double kGradStep = 1e-3;
inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;

using TD = Tensor<double>;
using InputsFn = std::function<TD(const std::vector<TD>&)>;

inline std::string describe(const GradcheckResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "max rel err %.3e over %zu entries (input %zu idx %lld: analytic %.6g numeric %.6g)",
                r.max_rel_error, r.checked, r.worst_input, static_cast<long long>(r.worst_index),
                r.analytic_at_worst, r.numeric_at_worst);
  return buf;
}

/// Redraws parameters at unit activation scale: fan-in scaled conv weights,
/// norm gains in [0.5, 1.5], everything else uniform in [-0.5, 0.5].
inline void unit_scale(ParamStore<double>& ps, Rng& rng) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names()[i];
    auto& t = ps.tensors()[i];
    const Shape& s = t.shape();
    if (name.ends_with("norm.weight")) {
      for (auto& v : t.data_mut()) v = rng.uniform(0.5, 1.5);
    } else if (name.ends_with(".weight")) {
      // A larger gain ahead of the fusion norm keeps its input variance well above zero.
      const double gain = name.ends_with("fuse.conv.weight") ? 4.0 : 1.0;
      const double std = gain / std::sqrt(static_cast<double>(s.c * s.h * s.w));
      for (auto& v : t.data_mut()) v = rng.normal(0.0, std);
    } else {
      for (auto& v : t.data_mut()) v = rng.uniform(-0.5, 0.5);
    }
  }
}

namespace detail {

inline void record(SuiteReport& rep, const std::string& name, const GradcheckResult& r, double tol) {
  rep.add(name, r.passed(tol), describe(r));
}

inline void check_primitive(SuiteReport& rep, const std::string& name, const InputsFn& fn, std::vector<TD> inputs) {
  const auto r = gradcheck([&](const std::vector<TD>& in) { return weighted_sum(fn(in)); }, std::move(inputs),
                           GradcheckOptions{kGradStep});
  record(rep, name, r, kPrimitiveTolerance);
}

// Nudges samples off the kinks of relu/abs (0) and clamp_max (0.5).
inline TD off_kinks(TD x) {
  for (auto& v : x.data_mut()) {
    if (std::abs(v) < 0.01 || std::abs(v - 0.5) < 0.01) v += 0.05;
  }
  return x;
}

inline double esem_relu_margin(const TD& thr_hat, const ParamStore<double>& ps, const std::string& prefix) {
  if (!ps.contains(prefix + "esem.w1.weight")) return std::numeric_limits<double>::infinity();
  NoGradGuard guard;
  const TD pre = ops::conv2d(thr_hat, ps.get(prefix + "esem.w1.weight"), ps.get(prefix + "esem.w1.bias"), 1, 1);
  double m = std::numeric_limits<double>::infinity();
  for (double v : pre.data()) m = std::min(m, std::abs(v));
  return m;
}

inline std::vector<TD> detached(const ParamStore<double>& ps) {
  std::vector<TD> out;
  for (const auto& t : ps.tensors()) out.push_back(t.detach());
  return out;
}

inline ParamStore<double> rebuild(const std::vector<std::string>& names, const std::vector<TD>& in, std::size_t first) {
  ParamStore<double> local;
  for (std::size_t i = 0; i < names.size(); ++i) local.add(names[i], in[first + i]);
  return local;
}

}  // namespace detail

inline void primitive_checks(SuiteReport& rep) {
  using detail::check_primitive;
  using detail::off_kinks;
  Rng rng(10);
  struct ConvCase { const char* name; Shape x, w; int stride, pad, groups; };
  const ConvCase convs[] = {
      {"conv2d 3x3", {2, 3, 5, 5}, {4, 3, 3, 3}, 1, 1, 1},
      {"conv2d grouped stride 2", {1, 4, 6, 6}, {4, 2, 3, 3}, 2, 1, 2},
      {"conv2d depthwise 7x7", {2, 3, 6, 6}, {3, 1, 7, 7}, 1, 3, 3},
      {"conv2d patchify 4x4/4", {1, 2, 8, 8}, {3, 2, 4, 4}, 4, 0, 1},
      {"conv2d pointwise", {2, 3, 4, 4}, {5, 3, 1, 1}, 1, 0, 1},
  };
  for (const auto& c : convs) {
    check_primitive(rep, c.name,
                    [c](const std::vector<TD>& in) { return ops::conv2d(in[0], in[1], in[2], c.stride, c.pad, c.groups); },
                    {random_tensor(c.x, rng), random_tensor(c.w, rng), random_tensor(Shape{1, c.w.n, 1, 1}, rng)});
  }
  for (auto [oh, ow] : {std::pair{7, 9}, std::pair{2, 3}, std::pair{4, 4}}) {
    check_primitive(rep, "bilinear_interp 4x4->" + std::to_string(oh) + "x" + std::to_string(ow),
                    [oh, ow](const std::vector<TD>& in) { return ops::bilinear_interp(in[0], oh, ow); },
                    {random_tensor(Shape{2, 2, 4, 4}, rng)});
  }
  check_primitive(rep, "softmax_lastdim", [](const std::vector<TD>& in) { return ops::softmax_lastdim(in[0]); },
                  {random_tensor(Shape{2, 1, 3, 5}, rng)});
  check_primitive(rep, "matmul", [](const std::vector<TD>& in) { return ops::matmul(in[0], in[1]); },
                  {random_tensor(Shape{2, 1, 3, 4}, rng), random_tensor(Shape{2, 1, 4, 5}, rng)});
  check_primitive(rep, "transpose_hw", [](const std::vector<TD>& in) { return ops::transpose_hw(in[0]); },
                  {random_tensor(Shape{2, 2, 3, 4}, rng)});

  const Shape s{2, 3, 3, 4};
  const std::pair<const char*, InputsFn> binary[] = {
      {"add", [](const std::vector<TD>& in) { return ops::add(in[0], in[1]); }},
      {"sub", [](const std::vector<TD>& in) { return ops::sub(in[0], in[1]); }},
      {"mul", [](const std::vector<TD>& in) { return ops::mul(in[0], in[1]); }},
  };
  for (const auto& [name, fn] : binary) {
    for (Shape bs : {s, Shape{1, 3, 3, 4}, Shape{2, 1, 3, 4}, Shape{1, 3, 1, 1}}) {
      check_primitive(rep, std::string(name) + " rhs " + bs.str(), fn, {random_tensor(s, rng), random_tensor(bs, rng)});
    }
  }
  const std::pair<const char*, InputsFn> unary[] = {
      {"relu", [](const std::vector<TD>& in) { return ops::relu(in[0]); }},
      {"gelu", [](const std::vector<TD>& in) { return ops::gelu(in[0]); }},
      {"sigmoid", [](const std::vector<TD>& in) { return ops::sigmoid(in[0]); }},
      {"softplus", [](const std::vector<TD>& in) { return ops::softplus(in[0]); }},
      {"abs", [](const std::vector<TD>& in) { return ops::abs(in[0]); }},
      {"clamp_max", [](const std::vector<TD>& in) { return ops::clamp_max(in[0], 0.5); }},
      {"scalar_mul", [](const std::vector<TD>& in) { return ops::scalar_mul(in[0], -1.7); }},
      {"add_scalar", [](const std::vector<TD>& in) { return ops::add_scalar(in[0], 0.3); }},
      {"sum", [](const std::vector<TD>& in) { return ops::sum(in[0]); }},
      {"mean", [](const std::vector<TD>& in) { return ops::mean(in[0]); }},
      {"narrow width", [](const std::vector<TD>& in) { return ops::narrow(in[0], 3, 1, 2); }},
      {"narrow channels", [](const std::vector<TD>& in) { return ops::narrow(in[0], 1, 1, 2); }},
      {"flatten_spatial", [](const std::vector<TD>& in) { return ops::flatten_spatial(in[0]); }},
      {"unflatten_spatial",
       [](const std::vector<TD>& in) { return ops::unflatten_spatial(ops::flatten_spatial(in[0]), 3, 4); }},
  };
  for (const auto& [name, fn] : unary) check_primitive(rep, name, fn, {off_kinks(random_tensor(s, rng))});

  check_primitive(rep, "layer_norm", [](const std::vector<TD>& in) { return ops::layer_norm(in[0], in[1], in[2]); },
                  {random_tensor(Shape{2, 5, 3, 3}, rng), random_tensor(Shape{1, 5, 1, 1}, rng),
                   random_tensor(Shape{1, 5, 1, 1}, rng)});
  check_primitive(rep, "concat_channels",
                  [](const std::vector<TD>& in) { return ops::concat_channels(in[0], in[1]); },
                  {random_tensor(Shape{2, 2, 3, 3}, rng), random_tensor(Shape{2, 3, 3, 3}, rng)});

  // Loss terms on an instance whose |pred - gt| and neighbour differences clear the kink at 0.
  for (std::uint64_t seed = 20;; ++seed) {
    Rng lr(seed);
    const TD pred = random_tensor(Shape{1, 1, 5, 6}, lr, 1.0, 5.0);
    const TD gt = random_tensor(Shape{1, 1, 5, 6}, lr, 1.0, 5.0);
    const TD rgb = random_tensor(Shape{1, 3, 5, 6}, lr, 0.0, 1.0);
    TD mask(Shape{1, 1, 5, 6}, 1.0);
    mask.data_mut()[7] = 0.0;
    double margin = std::numeric_limits<double>::infinity();
    const auto p = pred.data(), g = gt.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      margin = std::min(margin, std::abs(p[i] - g[i]));
      if (i % 6 != 5) margin = std::min(margin, std::abs(p[i + 1] - p[i]));
      if (i + 6 < p.size()) margin = std::min(margin, std::abs(p[i + 6] - p[i]));
    }
    if (margin < 0.02) continue;
    const auto r = gradcheck(
        [&](const std::vector<TD>& in) { return total_loss(in[0], gt, mask, rgb, LossWeights{}); }, {pred},
        GradcheckOptions{kGradStep});
    detail::record(rep, "total_loss (l1 + edge-aware smoothness)", r, kPrimitiveTolerance);
    break;
  }
}

inline void fuse_level_checks(SuiteReport& rep) {
  struct Case { const char* name; FusionConfig cfg; };
  const Case cases[] = {
      {"fuse_level egfusion mca+esem learned", FusionConfig{}},
      {"fuse_level egfusion no mca", FusionConfig{FusionMode::egfusion, false, EsemMode::learned, 2}},
      {"fuse_level egfusion esem none", FusionConfig{FusionMode::egfusion, true, EsemMode::none, 2}},
      {"fuse_level concat", FusionConfig{FusionMode::concat, true, EsemMode::learned, 2}},
  };
  const std::string prefix = "lvl.";
  for (const auto& c : cases) {
    for (std::uint64_t seed = 1200;; ++seed) {
      ParamStore<float> pf;
      Rng init(seed);
      add_fusion_level_params(pf, prefix, LevelGeometry{4, 4, 4}, c.cfg, init);
      auto ps = pf.cast<double>();
      Rng rng(seed + 1000);
      unit_scale(ps, rng);
      const TD f_rgb = random_tensor(Shape{1, 4, 4, 4}, rng);
      const TD f_thr = random_tensor(Shape{1, 4, 4, 4}, rng);
      const TD thr_hat = ps.contains(prefix + "pe") ? ops::add(f_thr, ps.get(prefix + "pe")).detach() : f_thr;
      if (detail::esem_relu_margin(thr_hat, ps, prefix) <= 0.02) continue;
      std::vector<TD> inputs{f_rgb, f_thr};
      for (auto& t : detail::detached(ps)) inputs.push_back(t);
      const auto names = ps.names();
      const auto r = gradcheck(
          [&](const std::vector<TD>& in) {
            return weighted_sum(fuse_level(in[0], in[1], detail::rebuild(names, in, 2), prefix, c.cfg), 26);
          },
          std::move(inputs), GradcheckOptions{kGradStep});
      detail::record(rep, c.name, r, kPrimitiveTolerance);
      break;
    }
  }
}

/// Model used by the full-model check: 32x32 RGB and THR, narrow widths.
inline ModelConfig gradcheck_model_config(Modality modality = Modality::fused) {
  ModelConfig c;
  c.height = c.width = 32;
  c.thr_height = c.thr_width = 32;
  c.rgb_encoder.stage_widths = {8, 16, 16, 32};
  c.thr_encoder.stage_widths = {8, 16, 16, 32};
  c.decoder.stage_widths = {16, 8, 8};
  c.modality = modality;
  c.seed = 5;
  return c;
}

inline void full_model_checks(SuiteReport& rep, std::int64_t entries_per_tensor = 12) {
  for (Modality m : {Modality::fused, Modality::rgb_only, Modality::thr_only}) {
    const ModelConfig cfg = gradcheck_model_config(m);
    auto ps = build_params(cfg).cast<double>();
    Rng rng(cfg.seed + 77);
    unit_scale(ps, rng);
    const TD rgb = random_tensor(Shape{1, 3, cfg.height, cfg.width}, rng, 0.0, 1.0);
    const TD thr = random_tensor(Shape{1, 1, cfg.thr_height, cfg.thr_width}, rng, 0.0, 1.0);
    std::vector<TD> inputs{rgb, thr};
    for (auto& t : detail::detached(ps)) inputs.push_back(t);
    const auto names = ps.names();
    GradcheckOptions opts{kGradStep};
    opts.max_entries_per_input = entries_per_tensor;
    const auto r = gradcheck(
        [&](const std::vector<TD>& in) {
          return weighted_sum(forward(in[0], in[1], detail::rebuild(names, in, 2), cfg), 31);
        },
        std::move(inputs), opts);
    detail::record(rep, std::string("full model ") + to_string(m) + " 32x32 batch 1", r, kModelTolerance);
  }
}

/// Every differentiable primitive, the loss, each fuse_level variant, and the
/// full model in all three modalities, in f64 with central differences.
inline SuiteReport gradcheck_suite() {
  return run_suite("gradcheck", [](SuiteReport& rep) {
    primitive_checks(rep);
    fuse_level_checks(rep);
    full_model_checks(rep);
  });
}

}  // namespace rtfusion::verify
