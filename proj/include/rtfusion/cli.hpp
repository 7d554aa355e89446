#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rtfusion/ablation.hpp"
#include "rtfusion/checkpoint.hpp"
#include "rtfusion/colormap.hpp"
#include "rtfusion/config.hpp"
#include "rtfusion/data.hpp"
#include "rtfusion/errors.hpp"
#include "rtfusion/image_io.hpp"
#include "rtfusion/manifest.hpp"
#include "rtfusion/metrics.hpp"
#include "rtfusion/train.hpp"
#include "rtfusion/verify/format_suite.hpp"
#include "rtfusion/verify/gradcheck_suite.hpp"
#include "rtfusion/verify/invariant_suite.hpp"
#include "rtfusion/verify/metric_suite.hpp"

// Command-line front end. run() parses argv, dispatches to one subcommand and
// maps failures onto exit codes: 0 success, 1 usage, 2 data or format,
// 3 numerical failure (including a failed selfcheck).
namespace rtfusion::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline constexpr const char* kReportFormat = "rtfusion-metrics";
inline constexpr const char* kAblationTable = "ablation.txt";
inline constexpr const char* kAblationJson = "ablation.json";
inline constexpr const char* kSelfcheckJson = "selfcheck.json";

/// Manifest location for a command whose output is a single file.
inline fs::path sidecar_manifest(const fs::path& file) { return fs::path(file.string() + ".manifest.json"); }

/// Defaults, then the JSON file (if any), then each KEY=VALUE override.
inline ModelConfig resolve_config(const std::optional<std::string>& path, const std::vector<std::string>& sets) {
  nlohmann::json j = nlohmann::json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw DataError("cannot open config " + *path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(*path + ": " + e.what());
    }
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ShapeError("--set expects KEY=VALUE, got '" + s + "'");
    set_config_leaf(j, s.substr(0, eq), s.substr(eq + 1));
  }
  ModelConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

inline std::string command_line(int argc, const char* const* argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

/// Scenario rows in first-seen order of {day, night, rain, others}, overall last.
inline std::vector<std::pair<std::string, MetricsReport>> report_rows(const std::map<std::string, MetricsReport>& m) {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const char* s : {"day", "night", "rain"}) {
    if (const auto it = m.find(s); it != m.end()) rows.emplace_back(*it);
  }
  for (const auto& kv : m) {
    if (kv.first != kOverall && kv.first != "day" && kv.first != "night" && kv.first != "rain") rows.push_back(kv);
  }
  if (const auto it = m.find(kOverall); it != m.end()) rows.emplace_back(*it);
  return rows;
}

inline nlohmann::json report_json(const std::map<std::string, MetricsReport>& m, const std::string& split,
                                  const std::optional<std::string>& checkpoint, std::int64_t step) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [k, r] : m) metrics[k] = r;
  return {{"format", kReportFormat},
          {"version", 1},
          {"split", split},
          {"checkpoint", checkpoint ? nlohmann::json(*checkpoint) : nlohmann::json(nullptr)},
          {"step", step},
          {"columns", metric_columns()},
          {"metrics", metrics}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

struct GenDataArgs {
  std::string out;
  std::int64_t train = 8;
  std::int64_t val = 4;
  std::string scenarios = "day,night,rain";
  std::uint64_t seed = 0;
  std::int64_t size = 64;
  std::int64_t thr_downsample = 2;
};

inline int gen_data(const GenDataArgs& a, const std::string& cmd, std::ostream& out) {
  DatasetPlan plan;
  plan.train = a.train;
  plan.val = a.val;
  plan.scenarios = parse_scenarios(a.scenarios);
  plan.seed = a.seed;
  SceneSpec spec;
  spec.height = spec.width = a.size;
  spec.thr_downsample = a.thr_downsample;
  spec.validate();
  write_dataset(a.out, plan, spec);
  RunManifest m;
  m.command = cmd;
  m.config = {{"train", a.train},      {"val", a.val},         {"scenarios", a.scenarios},
              {"seed", a.seed},        {"height", spec.height}, {"width", spec.width},
              {"thr_downsample", spec.thr_downsample}};
  m.seed = a.seed;
  m.output = a.out;
  m.timestamp = utc_timestamp();
  write_run_manifest(fs::path(a.out) / kRunManifest, m);
  out << "wrote " << plan_entries(plan).size() << " samples to " << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::string data;
  std::int64_t steps = 0;
  std::string out;
  std::optional<std::string> resume;
  std::int64_t log_every = 100;
};

inline int train(const TrainArgs& a, const std::string& cmd, std::ostream& out) {
  const ModelConfig cfg = resolve_config(a.config, a.sets);
  const Dataset data = load_dataset(a.data);
  check_dataset_matches(data, cfg);
  RunManifest m;
  m.command = cmd;
  m.config = to_json_value(cfg);
  m.seed = cfg.seed;
  m.output = a.out;
  m.timestamp = utc_timestamp();
  write_run_manifest(fs::path(a.out) / kRunManifest, m);
  FitOptions opt;
  opt.steps = a.steps;
  opt.out = a.out;
  if (a.resume) opt.resume_from = *a.resume;
  if (a.log_every > 0) {
    opt.on_step = [&](const LossRow& r) {
      if (r.step % a.log_every == 0 || r.step == a.steps) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "step %lld/%lld  total %.6f  l1 %.6f  smooth %.6f\n",
                      static_cast<long long>(r.step), static_cast<long long>(a.steps), r.total, r.l1, r.smooth);
        out << buf << std::flush;
      }
    };
  }
  const FitResult res = fit(data, cfg, opt);
  out << "config " << config_hash(cfg) << "  step " << res.step << "  checkpoint " << a.out << '\n';
  if (!res.validation.empty()) out << format_table(report_rows(res.validation.back().reports));
  return kOk;
}

struct EvalArgs {
  std::optional<std::string> checkpoint;
  std::string data;
  std::string report;
  std::string split = "val";
  bool oracle_pred = false;
};

inline int eval(const EvalArgs& a, const std::string& cmd, std::ostream& out) {
  if (!a.oracle_pred && !a.checkpoint) throw ShapeError("eval needs --checkpoint (or --oracle-pred)");
  if (a.split != "val" && a.split != "train") throw ShapeError("--split must be 'val' or 'train'");
  const Dataset data = load_dataset(a.data);
  const auto& samples = a.split == "val" ? data.val : data.train;
  if (samples.empty()) throw DataError(a.data + ": the " + a.split + " split is empty");
  std::map<std::string, MetricsReport> reports;
  std::int64_t step = 0;
  RunManifest m;
  if (a.oracle_pred) {
    // Test stub: the prediction is the ground truth wherever it is valid.
    std::vector<Tensor<float>> preds;
    for (const auto& s : samples) {
      Tensor<float> p = s.depth.detach();
      for (auto& v : p.data_mut()) v = v > 0.0f ? v : 1.0f;
      preds.push_back(std::move(p));
    }
    reports = evaluate_predictions(samples, preds);
    m.config = {{"oracle_pred", true}, {"split", a.split}};
  } else {
    const Checkpoint ck = load_checkpoint(*a.checkpoint);
    check_dataset_matches(data, ck.config);
    reports = evaluate_model(samples, ck.params, ck.config);
    step = ck.step;
    m.config = to_json_value(ck.config);
    m.seed = ck.config.seed;
  }
  write_text(a.report, report_json(reports, a.split, a.checkpoint, step).dump(2) + "\n");
  m.command = cmd;
  m.output = a.report;
  m.timestamp = utc_timestamp();
  write_run_manifest(sidecar_manifest(a.report), m);
  out << format_table(report_rows(reports));
  return kOk;
}

struct PredictArgs {
  std::string checkpoint;
  std::string rgb;
  std::optional<std::string> thr;
  std::string out;
  std::optional<std::string> vis;
};

inline int predict(const PredictArgs& a, const std::string& cmd, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const ModelConfig& cfg = ck.config;
  const Tensor<float> rgb = io::read_ppm(a.rgb);
  if (rgb.shape().h != cfg.height || rgb.shape().w != cfg.width) {
    throw DataError(a.rgb + ": image is " + std::to_string(rgb.shape().h) + "x" + std::to_string(rgb.shape().w) +
                    ", the checkpoint expects " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  Tensor<float> thr(Shape{1, 1, cfg.thr_height, cfg.thr_width});
  if (a.thr) {
    thr = io::read_pgm(*a.thr);
    if (thr.shape().h != cfg.thr_height || thr.shape().w != cfg.thr_width) {
      throw DataError(*a.thr + ": image is " + std::to_string(thr.shape().h) + "x" + std::to_string(thr.shape().w) +
                      ", the checkpoint expects " + std::to_string(cfg.thr_height) + "x" +
                      std::to_string(cfg.thr_width));
    }
  } else if (cfg.modality != Modality::rgb_only) {
    throw ShapeError("--thr is required unless the checkpoint is rgb_only");
  }
  Tensor<float> depth;
  {
    NoGradGuard guard;
    depth = forward(rgb, thr, ck.params, cfg);
  }
  io::write_pfm(a.out, depth);
  if (a.vis) io::write_ppm(*a.vis, colorize_depth(depth, cfg.decoder.d_min, cfg.decoder.d_max));
  RunManifest m;
  m.command = cmd;
  m.config = to_json_value(cfg);
  m.seed = cfg.seed;
  m.output = a.out;
  m.timestamp = utc_timestamp();
  write_run_manifest(sidecar_manifest(a.out), m);
  double lo = depth.data()[0], hi = lo;
  for (float v : depth.data()) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "wrote %s (%lldx%lld, depth %.3f..%.3f m)\n", a.out.c_str(),
                static_cast<long long>(depth.shape().h), static_cast<long long>(depth.shape().w), lo, hi);
  out << buf;
  return kOk;
}

struct AblateArgs {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::string data;
  std::int64_t steps = 0;
  std::string out;
  bool parallel = false;
};

inline int ablate(const AblateArgs& a, const std::string& cmd, std::ostream& out) {
  const ModelConfig base = resolve_config(a.config, a.sets);
  const Dataset data = load_dataset(a.data);
  check_dataset_matches(data, base);
  const auto variants = ablation_variants(base);
  RunManifest m;
  m.command = cmd;
  m.config = {{"base", to_json_value(base)}, {"steps", a.steps}, {"parallel", a.parallel}};
  for (const auto& v : variants) m.config["variants"].push_back(v.name);
  m.seed = base.seed;
  m.output = a.out;
  m.timestamp = utc_timestamp();
  write_run_manifest(fs::path(a.out) / kRunManifest, m);
  const AblationResult res = run_ablation(data, variants, a.steps, fs::path(a.out), a.parallel);
  const std::string table = ablation_table(res.rows);
  write_text(fs::path(a.out) / kAblationTable, table);
  write_text(fs::path(a.out) / kAblationJson, ablation_json(res, a.steps).dump(2) + "\n");
  out << table << "batch sequence " << res.batch_hash << " (identical for all " << res.rows.size() << " variants)\n";
  return kOk;
}

struct SelfcheckArgs {
  bool inject_metric_bug = false;
  std::optional<std::string> out;
};

inline int selfcheck(const SelfcheckArgs& a, const std::string& cmd, std::ostream& out) {
  using namespace verify;
  std::vector<SuiteReport> suites;
  const auto run = [&](SuiteReport r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-4s %-14s %3zu checks  %8.3f s\n", r.passed() ? "PASS" : "FAIL", r.name.c_str(),
                  r.checks.size(), r.seconds);
    out << buf;
    for (const auto& c : r.checks) {
      if (!c.passed) out << "       failed: " << c.name << (c.detail.empty() ? "" : "  [" + c.detail + "]") << '\n';
    }
    out << std::flush;
    suites.push_back(std::move(r));
  };
  run(gradcheck_suite());
  run(metric_oracle_suite(a.inject_metric_bug ? EvaluateFn(evaluate_with_injected_bug) : EvaluateFn(library_evaluate)));
  run(invariant_suite());
  run(format_suite());
  bool ok = true;
  nlohmann::json js = nlohmann::json::array();
  for (const auto& s : suites) {
    ok = ok && s.passed();
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : s.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    js.push_back({{"suite", s.name}, {"passed", s.passed()}, {"seconds", s.seconds}, {"checks", checks}});
  }
  if (a.out) {
    write_text(fs::path(*a.out) / kSelfcheckJson, nlohmann::json{{"passed", ok}, {"suites", js}}.dump(2) + "\n");
    RunManifest m;
    m.command = cmd;
    m.config = {{"inject_metric_bug", a.inject_metric_bug}};
    m.output = *a.out;
    m.timestamp = utc_timestamp();
    write_run_manifest(fs::path(*a.out) / kRunManifest, m);
  }
  out << (ok ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return ok ? kOk : kNumerical;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"RGB-thermal fused monocular depth estimation"};
  app.name("rtfusion");
  app.require_subcommand(1, 1);
  const auto override_opt = [](CLI::App* sub, std::vector<std::string>& sets) {
    sub->add_option("--set", sets, "Config override KEY=VALUE (dotted path, repeatable)")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  };

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic RGB/THR/depth dataset");
  gen->add_option("--out", g.out, "Dataset directory")->required();
  gen->add_option("--train", g.train, "Training samples per scenario")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--val", g.val, "Validation samples per scenario")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--scenarios", g.scenarios, "Comma-separated subset of day,night,rain")->capture_default_str();
  gen->add_option("--seed", g.seed, "First scene seed")->capture_default_str();
  gen->add_option("--size", g.size, "RGB height and width")->capture_default_str();
  gen->add_option("--thr-downsample", g.thr_downsample, "THR resolution divisor")->capture_default_str();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->add_option("--config", t.config, "Config JSON (omitted keys take defaults)");
  override_opt(tr, t.sets);
  tr->add_option("--data", t.data, "Dataset directory")->required();
  tr->add_option("--steps", t.steps, "Total optimizer steps")->required()->check(CLI::NonNegativeNumber);
  tr->add_option("--out", t.out, "Run directory")->required();
  tr->add_option("--resume", t.resume, "Continue from this run directory");
  tr->add_option("--log-every", t.log_every, "Print the loss every N steps (0: never)")->capture_default_str();

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", e.checkpoint, "Run or checkpoint directory");
  ev->add_option("--data", e.data, "Dataset directory")->required();
  ev->add_option("--report", e.report, "Metrics JSON output")->required();
  ev->add_option("--split", e.split, "val or train")->capture_default_str();
  ev->add_flag("--oracle-pred", e.oracle_pred, "Use ground truth as the prediction (testing stub)");

  PredictArgs p;
  auto* pr = app.add_subcommand("predict", "Predict depth for one RGB/THR pair");
  pr->add_option("--checkpoint", p.checkpoint, "Run or checkpoint directory")->required();
  pr->add_option("--rgb", p.rgb, "RGB image (binary PPM)")->required();
  pr->add_option("--thr", p.thr, "Thermal image (binary PGM)");
  pr->add_option("--out", p.out, "Depth output (PFM)")->required();
  pr->add_option("--png-vis", p.vis, "False-color depth visualization (binary PPM)");

  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "Train and compare the fusion ablation variants");
  abl->add_option("--config", ab.config, "Base config JSON");
  override_opt(abl, ab.sets);
  abl->add_option("--data", ab.data, "Dataset directory")->required();
  abl->add_option("--steps", ab.steps, "Steps per variant")->required()->check(CLI::NonNegativeNumber);
  abl->add_option("--out", ab.out, "Output directory")->required();
  abl->add_flag("--parallel", ab.parallel, "Run variants on up to RTFUSION_THREADS threads");

  SelfcheckArgs sc;
  auto* self = app.add_subcommand("selfcheck", "Run gradient, metric, invariant and file-format checks");
  self->add_flag("--inject-metric-bug", sc.inject_metric_bug, "Evaluate with a deliberately broken AbsRel");
  self->add_option("--out", sc.out, "Write selfcheck.json and a run manifest here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }
  const std::string cmd = command_line(argc, argv);
  try {
    if (gen->parsed()) return gen_data(g, cmd, out);
    if (tr->parsed()) return train(t, cmd, out);
    if (ev->parsed()) return eval(e, cmd, out);
    if (pr->parsed()) return predict(p, cmd, out);
    if (abl->parsed()) return ablate(ab, cmd, out);
    if (self->parsed()) return selfcheck(sc, cmd, out);
  } catch (const DataError& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace rtfusion::cli
