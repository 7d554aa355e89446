#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rtfusion/egfusion.hpp"
#include "rtfusion/gradcheck.hpp"
#include "test_util.hpp"

namespace rtfusion {
namespace {

using testing::random_tensor;
using testing::weighted_sum;
using TD = Tensor<double>;

ParamStore<double> make_level(std::int64_t c, std::int64_t h, std::int64_t w, const FusionConfig& cfg,
                              std::uint64_t seed, double std_scale = 1.0) {
  ParamStore<float> ps;
  Rng rng(seed);
  add_fusion_level_params(ps, "lvl.", LevelGeometry{c, h, w}, cfg, rng);
  auto out = ps.cast<double>();
  if (std_scale != 1.0) {
    for (auto& t : out.tensors())
      for (auto& v : t.data_mut()) v *= std_scale;
  }
  return out;
}

void expect_equal(const TD& a, const TD& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]) << "at " << i;
}

TEST(AddPe, ZeroEmbeddingIsIdentity) {
  Rng rng(1);
  const TD r = random_tensor(Shape{2, 3, 4, 5}, rng), t = random_tensor(Shape{2, 3, 4, 5}, rng);
  const auto [rh, th] = add_pe(r, t, TD(Shape{1, 3, 4, 5}, 0.0));
  expect_equal(rh, r);
  expect_equal(th, t);
}

TEST(AddPe, ZeroFeaturesGiveEmbedding) {
  Rng rng(2);
  const TD pe = random_tensor(Shape{1, 3, 4, 5}, rng);
  const auto [rh, th] = add_pe(TD(Shape{2, 3, 4, 5}), TD(Shape{2, 3, 4, 5}), pe);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < pe.numel(); ++i) {
      EXPECT_EQ(rh.data()[n * pe.numel() + i], pe.data()[i]);
      EXPECT_EQ(th.data()[n * pe.numel() + i], pe.data()[i]);
    }
}

TEST(AddPe, RejectsMismatch) {
  EXPECT_THROW(add_pe(TD(Shape{1, 3, 4, 4}), TD(Shape{1, 3, 4, 4}), TD(Shape{1, 2, 4, 4})), ShapeError);
  EXPECT_THROW(add_pe(TD(Shape{1, 3, 4, 4}), TD(Shape{1, 3, 4, 5}), TD(Shape{1, 3, 4, 4})), ShapeError);
}

// The shared embedding collects gradient from both branches.
TEST(AddPe, SharedGradientIsSumOfBranches) {
  Rng rng(3);
  const TD r = random_tensor(Shape{2, 2, 3, 3}, rng), t = random_tensor(Shape{2, 2, 3, 3}, rng);
  TD pe = random_tensor(Shape{1, 2, 3, 3}, rng);
  const auto loss = [&](std::vector<TD>& in) {
    auto [rh, th] = add_pe(r, t, in[0]);
    return ops::add(weighted_sum(ops::mul(rh, rh), 4), weighted_sum(ops::gelu(th), 5));
  };
  const auto res = gradcheck(loss, {pe});
  EXPECT_TRUE(res.passed(1e-4)) << res.max_rel_error;

  std::vector<TD> joint{pe.detach()};
  joint[0].requires_grad_(true);
  backward(loss(joint));
  const std::vector<double> both(joint[0].grad().begin(), joint[0].grad().end());
  TD pe1 = pe.detach(), pe2 = pe.detach();
  pe1.requires_grad_(true);
  pe2.requires_grad_(true);
  backward(weighted_sum(ops::mul(ops::add(r, pe1), ops::add(r, pe1)), 4));
  backward(weighted_sum(ops::gelu(ops::add(t, pe2)), 5));
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], pe1.grad()[i] + pe2.grad()[i], 1e-12);
}

TEST(Attend, SingleTokenPassesValueThrough) {
  Rng rng(4);
  const TD q = random_tensor(Shape{2, 3, 1, 1}, rng), k = random_tensor(Shape{2, 3, 1, 1}, rng);
  const TD v = random_tensor(Shape{2, 3, 1, 1}, rng);
  const auto r = attend(q, k, v);
  for (double a : r.attention.data()) EXPECT_EQ(a, 1.0);
  for (std::int64_t i = 0; i < v.numel(); ++i) EXPECT_DOUBLE_EQ(r.output.data()[i], v.data()[i]);
}

// A 2x2 feature map on a 1x1 downsampled grid: one token, so the residual adds
// the upsampled value map.
TEST(Mca, SingleTokenOutputIsResidualPlusValue) {
  FusionConfig cfg;
  const auto ps = make_level(3, 2, 2, cfg, 5, 10.0);
  const auto p = McaParams<double>::from(ps, "lvl.mca.");
  Rng rng(6);
  const TD r = random_tensor(Shape{1, 3, 2, 2}, rng), t = random_tensor(Shape{1, 3, 2, 2}, rng);
  const auto res = mca_forward(r, t, p);
  ASSERT_EQ(res.v_bar.shape(), (Shape{1, 3, 1, 1}));
  ASSERT_EQ(res.attention.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(res.attention.data()[0], 1.0);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x)
        EXPECT_NEAR(res.output.at(0, c, y, x), r.at(0, c, y, x) + res.v_bar.at(0, c, 0, 0), 1e-12);
}

TEST(Attend, IdenticalKeysGiveUniformRows) {
  Rng rng(7);
  const TD q = random_tensor(Shape{2, 4, 3, 3}, rng);
  TD k(Shape{2, 4, 3, 3});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 4; ++c) {
      const double v = rng.uniform(-2, 2);
      for (std::int64_t p = 0; p < 9; ++p) k.data_mut()[static_cast<std::size_t>((n * 4 + c) * 9 + p)] = v;
    }
  const auto r = attend(q, k, random_tensor(Shape{2, 4, 3, 3}, rng));
  for (double a : r.attention.data()) EXPECT_NEAR(a, 1.0 / 9.0, 1e-12);
}

// Two tokens in a 1x2 grid, d_k = 2. Row i of A is softmax([q_i.k_1, q_i.k_2] / sqrt 2).
TEST(Attend, TwoTokenClosedForm) {
  // Layout (N=1, C=2, H=1, W=2): channel-major, token fastest.
  const TD q(Shape{1, 2, 1, 2}, std::vector<double>{1.0, 0.5, -0.5, 2.0});
  const TD k(Shape{1, 2, 1, 2}, std::vector<double>{0.3, -1.0, 0.7, 0.2});
  const TD v(Shape{1, 2, 1, 2}, std::vector<double>{1.0, 3.0, -2.0, 4.0});
  const auto r = attend(q, k, v);
  const double qt[2][2] = {{1.0, -0.5}, {0.5, 2.0}};
  const double kt[2][2] = {{0.3, 0.7}, {-1.0, 0.2}};
  const double vt[2][2] = {{1.0, -2.0}, {3.0, 4.0}};
  for (int i = 0; i < 2; ++i) {
    const double s1 = (qt[i][0] * kt[0][0] + qt[i][1] * kt[0][1]) / std::sqrt(2.0);
    const double s2 = (qt[i][0] * kt[1][0] + qt[i][1] * kt[1][1]) / std::sqrt(2.0);
    const double a1 = 1.0 / (1.0 + std::exp(s2 - s1));
    const double a2 = 1.0 - a1;
    EXPECT_NEAR(r.attention.at(0, 0, i, 0), a1, 1e-6);
    EXPECT_NEAR(r.attention.at(0, 0, i, 1), a2, 1e-6);
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(r.output.at(0, c, 0, i), a1 * vt[0][c] + a2 * vt[1][c], 1e-6);
  }
}

TEST(Mca, TokenCountFollowsConvShape) {
  FusionConfig cfg;
  const auto ps = make_level(2, 5, 7, cfg, 8);
  Rng rng(9);
  const auto res = mca_forward(random_tensor(Shape{2, 2, 5, 7}, rng), random_tensor(Shape{2, 2, 5, 7}, rng),
                               McaParams<double>::from(ps, "lvl.mca."));
  EXPECT_EQ(res.attention.shape(), (Shape{2, 1, 12, 12}));
  EXPECT_EQ(res.output.shape(), (Shape{2, 2, 5, 7}));
  for (std::int64_t row = 0; row < 24; ++row) {
    double s = 0;
    for (std::int64_t j = 0; j < 12; ++j) s += res.attention.data()[static_cast<std::size_t>(row * 12 + j)];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Mca, ZeroValuePathIsExactIdentity) {
  FusionConfig cfg;
  auto ps = make_level(3, 4, 4, cfg, 10);
  // kv_down output channels [C, 2C) produce V; zero their weights and biases.
  for (const char* leaf : {"lvl.mca.kv_down.weight", "lvl.mca.kv_down.bias"}) {
    auto& t = ps.get(leaf);
    const std::int64_t per_out = t.numel() / 6;
    for (std::int64_t i = 3 * per_out; i < t.numel(); ++i) t.data_mut()[static_cast<std::size_t>(i)] = 0.0;
  }
  Rng rng(11);
  const TD r = random_tensor(Shape{2, 3, 4, 4}, rng);
  expect_equal(mca(r, random_tensor(Shape{2, 3, 4, 4}, rng), McaParams<double>::from(ps, "lvl.mca.")), r);
}

TEST(Mca, PureInThermalInput) {
  FusionConfig cfg;
  const auto ps = make_level(3, 4, 4, cfg, 12);
  Rng rng(13);
  const TD r = random_tensor(Shape{1, 3, 4, 4}, rng), t = random_tensor(Shape{1, 3, 4, 4}, rng);
  const auto p = McaParams<double>::from(ps, "lvl.mca.");
  expect_equal(mca(r, t, p), mca(r, t.detach(), p));
}

TEST(Esem, ZeroThermalGivesCross) {
  FusionConfig cfg;
  const auto ps = make_level(3, 4, 4, cfg, 14);
  const auto p = EsemParams<double>::from(ps, "lvl.esem.");
  Rng rng(15);
  const TD cross = random_tensor(Shape{2, 3, 4, 4}, rng);
  for (EsemMode m : {EsemMode::learned, EsemMode::sobel, EsemMode::none}) {
    expect_equal(esem(TD(Shape{2, 3, 4, 4}), cross, &p, m), cross);
  }
}

TEST(Esem, NoneModeIsCross) {
  Rng rng(16);
  const TD cross = random_tensor(Shape{1, 2, 3, 3}, rng);
  expect_equal(esem<double>(random_tensor(Shape{1, 2, 3, 3}, rng), cross, nullptr, EsemMode::none), cross);
}

TEST(Esem, LearnedMapIsSingleChannelOpenInterval) {
  FusionConfig cfg;
  const auto ps = make_level(4, 6, 6, cfg, 17, 50.0);
  const auto p = EsemParams<double>::from(ps, "lvl.esem.");
  Rng rng(18);
  const TD e = learned_edge_map(random_tensor(Shape{3, 4, 6, 6}, rng), p);
  EXPECT_EQ(e.shape(), (Shape{3, 1, 6, 6}));
  for (double v : e.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Esem, SobelRangeAndConstantImage) {
  Rng rng(19);
  const TD e = sobel_edge_map(random_tensor(Shape{2, 3, 5, 6}, rng));
  EXPECT_EQ(e.shape(), (Shape{2, 1, 5, 6}));
  for (std::int64_t n = 0; n < 2; ++n) {
    double lo = 1, hi = 0;
    for (std::int64_t i = 0; i < 30; ++i) {
      lo = std::min(lo, e.data()[n * 30 + i]);
      hi = std::max(hi, e.data()[n * 30 + i]);
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
  }
  const TD flat = sobel_edge_map(TD(Shape{1, 2, 4, 4}, 3.5));
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
}

// A vertical step edge in the channel mean: the two columns flanking the step
// carry the maximum response, the flat interior none.
TEST(Esem, SobelStepEdge) {
  TD x(Shape{1, 1, 4, 6});
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t c = 3; c < 6; ++c) x.data_mut()[static_cast<std::size_t>(y * 6 + c)] = 1.0;
  const TD e = sobel_edge_map(x);
  for (std::int64_t y = 0; y < 4; ++y) {
    EXPECT_EQ(e.at(0, 0, y, 0), 0.0);
    EXPECT_EQ(e.at(0, 0, y, 2), 1.0);
    EXPECT_EQ(e.at(0, 0, y, 3), 1.0);
    EXPECT_EQ(e.at(0, 0, y, 5), 0.0);
  }
}

TEST(FuseLevel, ConcatShape) {
  FusionConfig cfg;
  cfg.mode = FusionMode::concat;
  const auto ps = make_level(5, 4, 4, cfg, 20);
  Rng rng(21);
  EXPECT_EQ(fuse_level(random_tensor(Shape{2, 5, 4, 4}, rng), random_tensor(Shape{2, 5, 4, 4}, rng), ps, "lvl.", cfg).shape(),
            (Shape{2, 5, 4, 4}));
}

TEST(FuseLevel, RgbOnlyComposition) {
  FusionConfig cfg;
  cfg.mca_enabled = false;
  cfg.esem_mode = EsemMode::none;
  const auto ps = make_level(3, 4, 4, cfg, 22);
  EXPECT_FALSE(ps.contains("lvl.mca.q.weight"));
  EXPECT_FALSE(ps.contains("lvl.esem.w1.weight"));
  Rng rng(23);
  const TD r = random_tensor(Shape{2, 3, 4, 4}, rng);
  const TD expected = fusion_conv(ps, "lvl.", ops::add(r, ps.get("lvl.pe")));
  expect_equal(fuse_level(r, random_tensor(Shape{2, 3, 4, 4}, rng), ps, "lvl.", cfg), expected);
}

TEST(FuseLevel, ParamCountsFollowAblations) {
  const LevelGeometry g{6, 4, 4};
  FusionConfig full, no_mca, no_esem, sobel, concat;
  no_mca.mca_enabled = false;
  no_esem.esem_mode = EsemMode::none;
  sobel.esem_mode = EsemMode::sobel;
  concat.mode = FusionMode::concat;
  for (const auto& cfg : {full, no_mca, no_esem, sobel, concat}) {
    EXPECT_EQ(make_level(g.channels, g.height, g.width, cfg, 1).total_numel(), fusion_level_param_count(g, cfg));
  }
  const std::int64_t c = g.channels;
  EXPECT_LT(fusion_level_param_count(g, concat), fusion_level_param_count(g, full));
  EXPECT_EQ(fusion_level_param_count(g, full) - fusion_level_param_count(g, no_esem), (9 * c * c + c) + (c + 1));
  EXPECT_EQ(fusion_level_param_count(g, no_esem), fusion_level_param_count(g, sobel));
  EXPECT_LT(fusion_level_param_count(g, no_mca), fusion_level_param_count(g, full));
}

// Smallest |pre-activation| of the ESEM relu; finite differences are only
// meaningful when no step crosses the kink.
double relu_margin(const TD& f_thr, const ParamStore<double>& ps) {
  if (!ps.contains("lvl.esem.w1.weight")) return std::numeric_limits<double>::infinity();
  const TD thr_hat = ops::add(f_thr, ps.get("lvl.pe"));
  const TD pre = ops::conv2d(thr_hat, ps.get("lvl.esem.w1.weight"), ps.get("lvl.esem.w1.bias"), 1, 1);
  double m = std::numeric_limits<double>::infinity();
  for (double v : pre.data()) m = std::min(m, std::abs(v));
  return m;
}

// Gradchecks run on unit-scale instances: weights drawn with fan-in scaling so
// every activation is O(1), which keeps central-difference truncation error
// well below the tolerance.
void unit_scale(ParamStore<double>& ps, Rng& rng) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names()[i];
    auto& t = ps.tensors()[i];
    const Shape& s = t.shape();
    if (name.ends_with("norm.weight")) {
      for (auto& v : t.data_mut()) v = rng.uniform(0.5, 1.5);
    } else if (name.ends_with(".weight")) {
      // Convs feeding a layer norm get a larger gain so the normalized
      // activations stay far from the zero-variance regime.
      const double gain = name.ends_with("fuse.conv.weight") ? 4.0 : 1.0;
      const double std = gain / std::sqrt(static_cast<double>(s.c * s.h * s.w));
      for (auto& v : t.data_mut()) v = rng.normal(0.0, std);
    } else {
      for (auto& v : t.data_mut()) v = rng.uniform(-0.5, 0.5);
    }
  }
}

struct LevelInstance {
  std::vector<std::string> names;
  std::vector<TD> inputs;  // f_rgb, f_thr, then parameters in store order
};

// First seed at or after `seed` whose ESEM relu pre-activations clear the kink.
LevelInstance level_instance(const FusionConfig& cfg, std::uint64_t seed) {
  for (;; ++seed) {
    auto ps = make_level(4, 4, 4, cfg, seed);
    Rng rng(seed + 1000);
    unit_scale(ps, rng);
    LevelInstance inst;
    inst.inputs = {random_tensor(Shape{1, 4, 4, 4}, rng), random_tensor(Shape{1, 4, 4, 4}, rng)};
    if (relu_margin(inst.inputs[1], ps) <= 0.02) continue;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      inst.names.push_back(ps.names()[i]);
      inst.inputs.push_back(ps.tensors()[i].detach());
    }
    return inst;
  }
}

GradcheckResult check_level(const FusionConfig& cfg, const LevelInstance& inst, double step) {
  const auto loss = [&](std::vector<TD>& in) {
    ParamStore<double> local;
    for (std::size_t i = 0; i < inst.names.size(); ++i) local.add(inst.names[i], in[i + 2]);
    return weighted_sum(fuse_level(in[0], in[1], local, "lvl.", cfg), 26);
  };
  GradcheckOptions opts;
  opts.step = step;
  std::vector<TD> inputs;
  for (const auto& t : inst.inputs) inputs.push_back(t.detach());
  return gradcheck(loss, inputs, opts);
}

TEST(FuseLevel, GradcheckFullPipeline) {
  const FusionConfig cfg;
  const auto res = check_level(cfg, level_instance(cfg, 1200), 1e-3);
  EXPECT_TRUE(res.passed(1e-4)) << res.max_rel_error << " input " << res.worst_input << " idx " << res.worst_index
                                << " a=" << res.analytic_at_worst << " n=" << res.numeric_at_worst;
}

// Across instances the discrepancy must shrink quadratically with the step,
// the signature of a correct analytic gradient.
TEST(FuseLevel, GradcheckConvergesAcrossInstances) {
  for (const FusionConfig cfg : {FusionConfig{}, FusionConfig{FusionMode::egfusion, false, EsemMode::learned, 2},
                                 FusionConfig{FusionMode::concat, true, EsemMode::learned, 2}}) {
    for (std::uint64_t seed = 100; seed <= 600; seed += 100) {
      const auto inst = level_instance(cfg, seed);
      const auto coarse = check_level(cfg, inst, 1e-3);
      const auto fine = check_level(cfg, inst, 1e-4);
      EXPECT_LT(fine.max_rel_error, 1e-4) << "seed " << seed;
      EXPECT_LT(fine.max_rel_error, coarse.max_rel_error * 0.05 + 1e-5) << "seed " << seed;
    }
  }
}

TEST(FuseAll, ShapeAndZeroHigh) {
  FusionConfig cfg;
  ParamStore<float> pf;
  Rng rng(27);
  add_fusion_level_params(pf, kFusionLow, LevelGeometry{32, 8, 8}, cfg, rng);
  add_fusion_level_params(pf, kFusionHigh, LevelGeometry{128, 2, 2}, cfg, rng);
  auto ps = pf.cast<double>();
  const FeaturePair<double> rgb{random_tensor(Shape{2, 32, 8, 8}, rng), random_tensor(Shape{2, 128, 2, 2}, rng)};
  const FeaturePair<double> thr{random_tensor(Shape{2, 32, 8, 8}, rng), random_tensor(Shape{2, 128, 2, 2}, rng)};
  const TD out = fuse_all(rgb, thr, ps, cfg);
  EXPECT_EQ(out.shape(), (Shape{2, 160, 8, 8}));
  expect_equal(out, fuse_all(rgb, thr, ps, cfg));

  // With zero features and zero high-level weights the high path stays at zero
  // through the norm offset and gelu(0).
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.names()[i].starts_with(kFusionHigh) && !ps.names()[i].ends_with("norm.weight")) {
      for (auto& v : ps.tensors()[i].data_mut()) v = 0.0;
    }
  }
  const FeaturePair<double> rgb0{rgb.low, TD(Shape{2, 128, 2, 2})};
  const FeaturePair<double> thr0{thr.low, TD(Shape{2, 128, 2, 2})};
  const TD z = fuse_all(rgb0, thr0, ps, cfg);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 32; c < 160; ++c)
      for (std::int64_t p = 0; p < 64; ++p) ASSERT_EQ(z.data()[static_cast<std::size_t>((n * 160 + c) * 64 + p)], 0.0);
}

}  // namespace
}  // namespace rtfusion
