#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtfusion/errors.hpp"
#include "rtfusion/image_io.hpp"
#include "rtfusion/rng.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion {

enum class Scenario { day = 0, night = 1, rain = 2 };

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::day: return "day";
    case Scenario::night: return "night";
    case Scenario::rain: return "rain";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& name) {
  if (name == "day") return Scenario::day;
  if (name == "night") return Scenario::night;
  if (name == "rain") return Scenario::rain;
  throw std::invalid_argument("unknown scenario '" + name + "' (expected day, night or rain)");
}

inline std::vector<Scenario> parse_scenarios(const std::string& csv) {
  std::vector<Scenario> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const Scenario s = parse_scenario(item);
    if (std::find(out.begin(), out.end(), s) != out.end()) {
      throw std::invalid_argument("scenario '" + item + "' listed twice");
    }
    out.push_back(s);
  }
  if (out.empty()) throw std::invalid_argument("no scenarios given");
  return out;
}

struct Range {
  double lo;
  double hi;
};

struct SceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t thr_downsample = 2;  // THR is emitted at (H/k, W/k)

  std::array<int, 2> object_count{2, 5};
  Range depth_range{1.0, 40.0};    // meters
  Range object_width{0.6, 2.5};    // meters
  Range object_height{0.8, 3.0};   // meters
  double horizon_fraction = 0.35;  // horizon row as a fraction of H
  double camera_height = 1.5;      // meters
  double near_ground_depth = 2.0;  // depth seen by the bottom image row

  double texture_amplitude = 0.15;
  std::array<double, 3> illumination{1.0, 0.08, 0.6};  // day, night, rain
  std::array<double, 3> rgb_noise{0.01, 0.05, 0.02};
  double thr_noise = 0.01;
  Range thermal_contrast{0.45, 0.95};  // object temperature, normalized
  double label_dropout = 0.05;

  void validate() const {
    if (height < 1 || width < 1) throw ShapeError("scene size must be positive");
    if (thr_downsample < 1 || height % thr_downsample != 0 || width % thr_downsample != 0) {
      throw ShapeError("scene size must be divisible by thr_downsample");
    }
    const auto ok = [](Range r) { return r.lo > 0.0 && r.hi > r.lo; };
    if (object_count[0] < 0 || object_count[1] < object_count[0]) throw ShapeError("invalid object_count range");
    if (!ok(depth_range) || !ok(object_width) || !ok(object_height) || !ok(thermal_contrast)) {
      throw ShapeError("scene ranges must be nonempty and positive");
    }
    if (near_ground_depth < depth_range.lo || near_ground_depth >= depth_range.hi) {
      throw ShapeError("near_ground_depth must lie inside depth_range");
    }
  }
};

/// One aligned record. Tensors are single images with batch extent 1.
struct SamplePair {
  Tensor<float> rgb;    // (1,3,H,W) in [0,1]
  Tensor<float> thr;    // (1,1,H/k,W/k) in [0,1]
  Tensor<float> depth;  // (1,1,H,W) meters; 0 where mask is 0
  Tensor<float> mask;   // (1,1,H,W) in {0,1}
  Scenario scenario = Scenario::day;
  std::uint64_t seed = 0;
};

namespace detail {

struct SceneObject {
  double depth;
  double cx, bottom;        // pixel column of center, pixel row of ground contact
  double half_w, height_px;
  bool ellipse;
  std::array<double, 3> albedo;
  double temperature;
  double stripe_freq, stripe_phase;
};

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace detail

/// Procedural scene: ground plane under a horizon, a far backdrop at the
/// maximum depth, and fronto-parallel objects standing on the ground. Scene
/// geometry, thermal image and labels depend only on the seed; the scenario
/// changes only the RGB rendering.
inline SamplePair generate(const SceneSpec& spec, std::uint64_t seed, Scenario scenario) {
  spec.validate();
  const std::int64_t H = spec.height, W = spec.width;
  const double horizon = spec.horizon_fraction * static_cast<double>(H);
  const double k_ground = (static_cast<double>(H) - 0.5 - horizon) * spec.near_ground_depth;  // z * (row - horizon)
  const double focal = k_ground / spec.camera_height;
  const double far = spec.depth_range.hi;

  Rng scene(mix_seed(seed, 1));
  std::vector<detail::SceneObject> objects(
      static_cast<std::size_t>(scene.uniform_int(spec.object_count[0], spec.object_count[1])));
  for (auto& o : objects) {
    o.depth = scene.uniform(spec.near_ground_depth + 0.5, 0.6 * far);
    o.bottom = horizon + k_ground / o.depth - 0.5;
    o.cx = scene.uniform(0.0, static_cast<double>(W));
    o.half_w = 0.5 * scene.uniform(spec.object_width.lo, spec.object_width.hi) * focal / o.depth;
    o.height_px = scene.uniform(spec.object_height.lo, spec.object_height.hi) * focal / o.depth;
    o.ellipse = scene.bernoulli(0.5);
    for (auto& a : o.albedo) a = scene.uniform(0.2, 0.9);
    o.temperature = scene.uniform(spec.thermal_contrast.lo, spec.thermal_contrast.hi);
    o.stripe_freq = scene.uniform(0.15, 0.5);
    o.stripe_phase = scene.uniform(0.0, 2.0 * std::numbers::pi);
  }
  // Painter's order: far to near, so nearer surfaces overwrite.
  std::sort(objects.begin(), objects.end(), [](const auto& a, const auto& b) { return a.depth > b.depth; });

  const auto P = static_cast<std::size_t>(H * W);
  std::vector<double> depth(P), temp(P);
  std::vector<std::array<double, 3>> color(P);
  for (std::int64_t y = 0; y < H; ++y) {
    const double dy = static_cast<double>(y) + 0.5 - horizon;
    for (std::int64_t x = 0; x < W; ++x) {
      const auto i = static_cast<std::size_t>(y * W + x);
      const double z = dy > 0.0 ? std::clamp(k_ground / dy, spec.depth_range.lo, far) : far;
      depth[i] = z;
      if (z >= far) {
        const double t = std::clamp(static_cast<double>(y) / std::max(horizon, 1.0), 0.0, 1.0);
        color[i] = {0.45 + 0.2 * t, 0.6 + 0.15 * t, 0.85};
        temp[i] = 0.08;
      } else {
        // Ground stripes have a fixed world period, so their image frequency grows with distance.
        const double world_x = (static_cast<double>(x) + 0.5 - 0.5 * static_cast<double>(W)) * z / focal;
        const double tex = 1.0 + spec.texture_amplitude * std::sin(2.0 * std::numbers::pi * (world_x / 0.8 + z / 1.5));
        color[i] = {0.38 * tex, 0.33 * tex, 0.26 * tex};
        temp[i] = 0.2 + 0.25 * spec.near_ground_depth / z;
      }
    }
  }
  for (const auto& o : objects) {
    const double top = o.bottom - o.height_px;
    const double cy = 0.5 * (top + o.bottom);
    for (std::int64_t y = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(top)));
         y < std::min<std::int64_t>(H, static_cast<std::int64_t>(std::ceil(o.bottom)) + 1); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(o.cx - o.half_w)));
           x < std::min<std::int64_t>(W, static_cast<std::int64_t>(std::ceil(o.cx + o.half_w)) + 1); ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        if (py < top || py > o.bottom || std::abs(px - o.cx) > o.half_w) continue;
        if (o.ellipse) {
          const double ex = (px - o.cx) / o.half_w, ey = (py - cy) / (0.5 * o.height_px);
          if (ex * ex + ey * ey > 1.0) continue;
        }
        const auto i = static_cast<std::size_t>(y * W + x);
        if (o.depth >= depth[i]) continue;
        depth[i] = o.depth;
        const double tex = 1.0 + spec.texture_amplitude * std::sin(o.stripe_freq * px * o.depth + o.stripe_phase);
        for (int c = 0; c < 3; ++c) color[i][static_cast<std::size_t>(c)] = o.albedo[static_cast<std::size_t>(c)] * tex;
        temp[i] = o.temperature;
      }
    }
  }

  SamplePair s;
  s.scenario = scenario;
  s.seed = seed;
  s.depth = Tensor<float>(Shape{1, 1, H, W});
  s.mask = Tensor<float>(Shape{1, 1, H, W});
  {
    Rng labels(mix_seed(seed, 2));
    auto dd = s.depth.data_mut();
    auto md = s.mask.data_mut();
    for (std::size_t i = 0; i < P; ++i) {
      const bool valid = !labels.bernoulli(spec.label_dropout);
      md[i] = valid ? 1.0f : 0.0f;
      dd[i] = valid ? static_cast<float>(depth[i]) : 0.0f;
    }
  }

  {
    const std::int64_t k = spec.thr_downsample;
    Rng noise(mix_seed(seed, 3));
    s.thr = Tensor<float>(Shape{1, 1, H / k, W / k});
    auto td = s.thr.data_mut();
    for (std::int64_t y = 0; y < H / k; ++y)
      for (std::int64_t x = 0; x < W / k; ++x) {
        double acc = 0.0;
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t b = 0; b < k; ++b) acc += temp[static_cast<std::size_t>((y * k + a) * W + x * k + b)];
        td[static_cast<std::size_t>(y * (W / k) + x)] =
            detail::clamp01(acc / static_cast<double>(k * k) + noise.normal(0.0, spec.thr_noise));
      }
  }

  {
    const auto si = static_cast<std::size_t>(scenario);
    const double illum = spec.illumination[si];
    Rng render(mix_seed(seed, 10 + si));
    std::vector<std::array<double, 3>> lit(P);
    for (std::size_t i = 0; i < P; ++i) {
      // Aerial perspective: distant surfaces fade toward the haze color.
      const double haze = 0.35 * depth[i] / far;
      for (std::size_t c = 0; c < 3; ++c) lit[i][c] = illum * ((1.0 - haze) * color[i][c] + haze * 0.7);
    }
    if (scenario == Scenario::rain) {
      const auto streaks = static_cast<int>(W / 3);
      for (int r = 0; r < streaks; ++r) {
        const auto x = render.uniform_int(0, W - 1);
        const auto y0 = render.uniform_int(0, H - 1);
        const auto len = render.uniform_int(4, 16);
        const double strength = render.uniform(0.25, 0.5);
        for (std::int64_t y = y0; y < std::min(H, y0 + len); ++y) {
          auto& px = lit[static_cast<std::size_t>(y * W + x)];
          for (auto& v : px) v = (1.0 - strength) * v + strength * 0.85;
        }
      }
      // 3x3 box blur with clamped borders.
      std::vector<std::array<double, 3>> blurred(P);
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          std::array<double, 3> acc{0, 0, 0};
          for (std::int64_t a = -1; a <= 1; ++a)
            for (std::int64_t b = -1; b <= 1; ++b) {
              const auto yy = std::clamp<std::int64_t>(y + a, 0, H - 1);
              const auto xx = std::clamp<std::int64_t>(x + b, 0, W - 1);
              for (std::size_t c = 0; c < 3; ++c) acc[c] += lit[static_cast<std::size_t>(yy * W + xx)][c];
            }
          for (auto& v : acc) v /= 9.0;
          blurred[static_cast<std::size_t>(y * W + x)] = acc;
        }
      lit.swap(blurred);
    }
    s.rgb = Tensor<float>(Shape{1, 3, H, W});
    auto rd = s.rgb.data_mut();
    const double sigma = spec.rgb_noise[si];
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < P; ++i) rd[c * P + i] = detail::clamp01(lit[i][c] + render.normal(0.0, sigma));
  }
  return s;
}

// ----- augmentation -----

struct AugmentConfig {
  std::int64_t crop_height = 0;  // 0 keeps the full height
  std::int64_t crop_width = 0;
  double flip_probability = 0.5;
  Range brightness{0.8, 1.2};
};

inline std::int64_t thr_ratio(const SamplePair& s) {
  const std::int64_t ry = s.rgb.shape().h / s.thr.shape().h;
  const std::int64_t rx = s.rgb.shape().w / s.thr.shape().w;
  if (ry != rx || ry * s.thr.shape().h != s.rgb.shape().h || rx * s.thr.shape().w != s.rgb.shape().w) {
    throw ShapeError("THR resolution must be an integer fraction of RGB resolution");
  }
  return ry;
}

namespace detail {

inline Tensor<float> crop_image(const Tensor<float>& t, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  const Shape& s = t.shape();
  Tensor<float> out(Shape{s.n, s.c, h, w});
  auto d = out.data_mut();
  for (std::int64_t c = 0; c < s.c; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) d[static_cast<std::size_t>((c * h + y) * w + x)] = t.at(0, c, y0 + y, x0 + x);
  return out;
}

inline Tensor<float> flip_image(const Tensor<float>& t) {
  const Shape& s = t.shape();
  Tensor<float> out(s);
  auto d = out.data_mut();
  for (std::int64_t c = 0; c < s.c; ++c)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) d[static_cast<std::size_t>((c * s.h + y) * s.w + x)] = t.at(0, c, y, s.w - 1 - x);
  return out;
}

}  // namespace detail

/// Crops the RGB-resolution window (dy, dx, h, w) from every field; the THR
/// window is the same region at THR resolution, so offsets and sizes must be
/// multiples of the RGB/THR ratio.
inline SamplePair crop_sample(const SamplePair& s, std::int64_t dy, std::int64_t dx, std::int64_t h, std::int64_t w) {
  const Shape& rs = s.rgb.shape();
  if (h > rs.h || w > rs.w) {
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " larger than image " +
                     std::to_string(rs.h) + "x" + std::to_string(rs.w));
  }
  if (dy < 0 || dx < 0 || dy + h > rs.h || dx + w > rs.w) throw ShapeError("crop window outside image");
  const std::int64_t r = thr_ratio(s);
  if (dy % r || dx % r || h % r || w % r) throw ShapeError("crop window must align with the THR grid");
  SamplePair out = s;
  out.rgb = detail::crop_image(s.rgb, dy, dx, h, w);
  out.depth = detail::crop_image(s.depth, dy, dx, h, w);
  out.mask = detail::crop_image(s.mask, dy, dx, h, w);
  out.thr = detail::crop_image(s.thr, dy / r, dx / r, h / r, w / r);
  return out;
}

inline SamplePair flip_sample(const SamplePair& s) {
  SamplePair out = s;
  out.rgb = detail::flip_image(s.rgb);
  out.thr = detail::flip_image(s.thr);
  out.depth = detail::flip_image(s.depth);
  out.mask = detail::flip_image(s.mask);
  return out;
}

/// Scales RGB by u and clamps to [0, 1]; other fields are untouched.
inline SamplePair adjust_brightness(const SamplePair& s, double u) {
  SamplePair out = s;
  if (u == 1.0) return out;
  out.rgb = s.rgb.detach();
  for (auto& v : out.rgb.data_mut()) v = detail::clamp01(static_cast<double>(v) * u);
  return out;
}

/// Random crop, joint horizontal flip and RGB brightness scaling; a pure
/// function of (sample, seed, cfg). Depth values are never altered.
inline SamplePair augment(const SamplePair& s, std::uint64_t seed, const AugmentConfig& cfg = {}) {
  const Shape& rs = s.rgb.shape();
  const std::int64_t ch = cfg.crop_height > 0 ? cfg.crop_height : rs.h;
  const std::int64_t cw = cfg.crop_width > 0 ? cfg.crop_width : rs.w;
  if (ch > rs.h || cw > rs.w) {
    throw ShapeError("crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " +
                     std::to_string(rs.h) + "x" + std::to_string(rs.w));
  }
  if (ch % 32 != 0 || cw % 32 != 0) throw ShapeError("crop size must be a multiple of 32");
  Rng rng(mix_seed(seed, 0xa11));
  const std::int64_t r = thr_ratio(s);
  const std::int64_t dy = r * rng.uniform_int(0, (rs.h - ch) / r);
  const std::int64_t dx = r * rng.uniform_int(0, (rs.w - cw) / r);
  const bool flip = rng.bernoulli(cfg.flip_probability);
  const double u = rng.uniform(cfg.brightness.lo, cfg.brightness.hi);
  SamplePair out = (ch == rs.h && cw == rs.w) ? s : crop_sample(s, dy, dx, ch, cw);
  if (flip) out = flip_sample(out);
  return adjust_brightness(out, u);
}

// ----- on-disk dataset -----

enum class Split { train, val };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

struct DatasetEntry {
  Scenario scenario;
  std::uint64_t seed;
  Split split;
  std::string path;  // relative to the dataset root
};

inline std::string sample_dir(Scenario scenario, std::uint64_t seed) {
  return std::string(to_string(scenario)) + "/" + std::to_string(seed);
}

/// Writes rgb.ppm, thr.pgm and depth.pfm (invalid pixels stored as 0).
inline void write_sample(const std::filesystem::path& dir, const SamplePair& s) {
  io::write_ppm(dir / "rgb.ppm", s.rgb);
  io::write_pgm16(dir / "thr.pgm", s.thr);
  io::write_pfm(dir / "depth.pfm", s.depth);
}

inline SamplePair read_sample(const std::filesystem::path& dir, Scenario scenario, std::uint64_t seed) {
  SamplePair s;
  s.scenario = scenario;
  s.seed = seed;
  s.rgb = io::read_ppm(dir / "rgb.ppm");
  s.thr = io::read_pgm(dir / "thr.pgm");
  s.depth = io::read_pfm(dir / "depth.pfm");
  const Shape& rs = s.rgb.shape();
  if (s.depth.shape().h != rs.h || s.depth.shape().w != rs.w) {
    throw DataError(dir.string() + ": depth size does not match rgb size");
  }
  s.mask = Tensor<float>(s.depth.shape());
  auto md = s.mask.data_mut();
  const auto dd = s.depth.data();
  for (std::size_t i = 0; i < dd.size(); ++i) {
    if (!std::isfinite(dd[i]) || dd[i] < 0.0f) throw DataError(dir.string() + ": invalid depth value");
    md[i] = dd[i] > 0.0f ? 1.0f : 0.0f;
  }
  thr_ratio(s);
  return s;
}

struct DatasetPlan {
  std::int64_t train = 8;
  std::int64_t val = 4;
  std::vector<Scenario> scenarios{Scenario::day, Scenario::night, Scenario::rain};
  std::uint64_t seed = 0;
};

// Scene seeds seed..seed+train-1 form the training split and the next `val`
// seeds the validation split, for every scenario.
inline std::vector<DatasetEntry> plan_entries(const DatasetPlan& plan) {
  std::vector<DatasetEntry> out;
  for (Scenario sc : plan.scenarios) {
    for (std::int64_t i = 0; i < plan.train + plan.val; ++i) {
      const std::uint64_t seed = plan.seed + static_cast<std::uint64_t>(i);
      out.push_back({sc, seed, i < plan.train ? Split::train : Split::val, sample_dir(sc, seed)});
    }
  }
  return out;
}

inline nlohmann::json index_json(const DatasetPlan& plan, const SceneSpec& spec, const std::vector<DatasetEntry>& entries) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : entries) {
    samples.push_back({{"scenario", to_string(e.scenario)}, {"seed", e.seed}, {"split", to_string(e.split)}, {"path", e.path}});
  }
  nlohmann::json scen = nlohmann::json::array();
  for (Scenario s : plan.scenarios) scen.push_back(to_string(s));
  return {{"format", "rtfusion-dataset"},
          {"version", 1},
          {"image_size", {spec.height, spec.width}},
          {"thr_size", {spec.height / spec.thr_downsample, spec.width / spec.thr_downsample}},
          {"seed", plan.seed},
          {"train_per_scenario", plan.train},
          {"val_per_scenario", plan.val},
          {"scenarios", scen},
          {"samples", samples}};
}

inline void write_dataset(const std::filesystem::path& root, const DatasetPlan& plan, const SceneSpec& spec = {}) {
  if (plan.train < 0 || plan.val < 0) throw std::invalid_argument("sample counts must be >= 0");
  const auto entries = plan_entries(plan);
  for (const auto& e : entries) write_sample(root / e.path, generate(spec, e.seed, e.scenario));
  std::ofstream out(root / "index.json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (root / "index.json").string());
  out << index_json(plan, spec, entries).dump(2) << '\n';
}

inline std::vector<DatasetEntry> read_index(const std::filesystem::path& root) {
  const auto path = root / "index.json";
  if (!std::filesystem::is_directory(root)) throw DataError("data directory not found: " + root.string());
  std::ifstream in(path);
  if (!in) throw DataError("missing dataset index: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    std::vector<DatasetEntry> out;
    for (const auto& s : j.at("samples")) {
      const std::string split = s.at("split").get<std::string>();
      if (split != "train" && split != "val") throw DataError("unknown split '" + split + "'");
      out.push_back({parse_scenario(s.at("scenario").get<std::string>()), s.at("seed").get<std::uint64_t>(),
                     split == "train" ? Split::train : Split::val, s.at("path").get<std::string>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

struct Dataset {
  std::vector<SamplePair> train;
  std::vector<SamplePair> val;
};

inline Dataset load_dataset(const std::filesystem::path& root) {
  Dataset ds;
  for (const auto& e : read_index(root)) {
    auto s = read_sample(root / e.path, e.scenario, e.seed);
    (e.split == Split::train ? ds.train : ds.val).push_back(std::move(s));
  }
  return ds;
}

}  // namespace rtfusion
