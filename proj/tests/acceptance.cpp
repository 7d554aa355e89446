// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Pass criterion numbers as arguments to run a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rtfusion/checkpoint.hpp"
#include "rtfusion/train.hpp"
#include "rtfusion/verify/format_suite.hpp"
#include "rtfusion/verify/gradcheck_suite.hpp"
#include "rtfusion/verify/invariant_suite.hpp"
#include "rtfusion/verify/metric_suite.hpp"

#ifndef RTFUSION_CLI_PATH
#error "RTFUSION_CLI_PATH must name the built command-line tool"
#endif

namespace fs = std::filesystem;
using namespace rtfusion;

namespace {

// Pinned budgets and thresholds.
constexpr double kGradcheckBudget = 120.0;
constexpr double kMetricBudget = 10.0;
constexpr double kInvariantBudget = 60.0;
constexpr double kOverfitBudget = 600.0;
constexpr std::int64_t kOverfitSteps = 500;
constexpr double kOverfitRatio = 0.10;
constexpr double kProtocolBudget = 3600.0;
constexpr std::int64_t kProtocolSteps = 2000;
constexpr std::int64_t kProtocolTrainPerScenario = 120;
constexpr std::int64_t kProtocolValPerScenario = 40;
constexpr int kProtocolSeeds = 3;
constexpr int kProtocolWinsNeeded = 2;
constexpr double kReproBudget = 300.0;
constexpr std::int64_t kReproSteps = 12;
constexpr double kFormatBudget = 5.0;

struct Verdict {
  bool passed;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string describe_suite(const verify::SuiteReport& r, double budget) {
  std::string d = fmt("%zu checks, %zu failed, %.1f s (budget %.0f s)", r.checks.size(), r.failures(),
                      r.seconds, budget);
  for (const auto& c : r.checks) {
    if (!c.passed) d += "\n    failed: " + c.name + (c.detail.empty() ? "" : " (" + c.detail + ")");
  }
  return d;
}

Verdict suite_verdict(const verify::SuiteReport& r, double budget) {
  return {r.passed() && r.seconds < budget, describe_suite(r, budget)};
}

std::vector<SamplePair> generate_split(std::uint64_t first_seed, std::int64_t per_scenario) {
  std::vector<SamplePair> out;
  for (Scenario sc : {Scenario::day, Scenario::night, Scenario::rain}) {
    for (std::int64_t i = 0; i < per_scenario; ++i) out.push_back(generate(SceneSpec{}, first_seed + i, sc));
  }
  return out;
}

Verdict overfit() {
  Dataset ds;
  const Scenario scenarios[] = {Scenario::day, Scenario::night, Scenario::rain, Scenario::day};
  for (int i = 0; i < 4; ++i) ds.train.push_back(generate(SceneSpec{}, 700 + i, scenarios[i]));
  FitOptions opt;
  opt.steps = kOverfitSteps;
  const auto t0 = std::chrono::steady_clock::now();
  const FitResult r = fit(ds, ModelConfig{}, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double first = r.losses.front().total, last = r.losses.back().total;
  std::int64_t crossed = 0;
  for (const auto& row : r.losses) {
    if (row.total < kOverfitRatio * first) {
      crossed = row.step;
      break;
    }
  }
  return {last < kOverfitRatio * first && secs < kOverfitBudget,
          fmt("total loss %.4f -> %.4f at step %lld (ratio %.4f, need < %.2f; first below at step %lld), %.1f s "
              "(budget %.0f s)",
              first, last, static_cast<long long>(r.losses.back().step), last / first, kOverfitRatio,
              static_cast<long long>(crossed), secs, kOverfitBudget)};
}

struct ProtocolRun {
  double night_abs_rel;
  double overall_abs_rel;
};

struct ProtocolResult {
  std::vector<std::map<std::string, ProtocolRun>> per_seed;
  double seconds = 0.0;
};

// Same data, batch schedule and initialization seed for every variant within
// a protocol seed; the seed changes the scenes and the initialization.
const ProtocolResult& protocol() {
  static const ProtocolResult result = [] {
    ProtocolResult res;
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 1; s <= kProtocolSeeds; ++s) {
      Dataset ds;
      const std::uint64_t base = 10000ULL * static_cast<std::uint64_t>(s);
      ds.train = generate_split(base, kProtocolTrainPerScenario);
      ds.val = generate_split(base + kProtocolTrainPerScenario, kProtocolValPerScenario);
      std::map<std::string, ModelConfig> variants;
      ModelConfig fused;
      fused.seed = static_cast<std::uint64_t>(s);
      variants["fused"] = fused;
      variants["rgb_only"] = fused;
      variants["rgb_only"].modality = Modality::rgb_only;
      variants["thr_only"] = fused;
      variants["thr_only"].modality = Modality::thr_only;
      variants["concat"] = fused;
      variants["concat"].fusion.mode = FusionMode::concat;
      std::map<std::string, ProtocolRun> runs;
      for (const auto& [name, cfg] : variants) {
        FitOptions opt;
        opt.steps = kProtocolSteps;
        const auto v0 = std::chrono::steady_clock::now();
        const FitResult r = fit(ds, cfg, opt);
        const auto& reps = r.validation.back().reports;
        runs[name] = {reps.at("night").abs_rel, reps.at(kOverall).abs_rel};
        std::printf("  protocol seed %d %-8s night AbsRel %.4f overall AbsRel %.4f final loss %.4f (%.0f s)\n", s,
                    name.c_str(), runs[name].night_abs_rel, runs[name].overall_abs_rel, r.losses.back().total,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - v0).count());
        std::fflush(stdout);
      }
      res.per_seed.push_back(runs);
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }();
  return result;
}

std::string wins_detail(const ProtocolResult& p, const std::string& a, const std::string& b, bool night) {
  std::string d;
  for (std::size_t s = 0; s < p.per_seed.size(); ++s) {
    const auto& r = p.per_seed[s];
    const double x = night ? r.at(a).night_abs_rel : r.at(a).overall_abs_rel;
    const double y = night ? r.at(b).night_abs_rel : r.at(b).overall_abs_rel;
    d += fmt("%sseed %zu: %.4f vs %.4f", d.empty() ? "" : "; ", s + 1, x, y);
  }
  return d;
}

int count_wins(const ProtocolResult& p, const std::function<bool(const std::map<std::string, ProtocolRun>&)>& won) {
  int wins = 0;
  for (const auto& r : p.per_seed) wins += won(r) ? 1 : 0;
  return wins;
}

Verdict fusion_trend() {
  const auto& p = protocol();
  const int fused_wins =
      count_wins(p, [](const auto& r) { return r.at("fused").night_abs_rel < r.at("rgb_only").night_abs_rel; });
  const int thr_wins =
      count_wins(p, [](const auto& r) { return r.at("thr_only").night_abs_rel < r.at("rgb_only").night_abs_rel; });
  const bool passed = fused_wins >= kProtocolWinsNeeded && thr_wins >= kProtocolWinsNeeded && p.seconds < kProtocolBudget;
  return {passed, fmt("night AbsRel fused < rgb_only in %d/%d seeds [", fused_wins, kProtocolSeeds) +
                      wins_detail(p, "fused", "rgb_only", true) +
                      fmt("]; thr_only < rgb_only in %d/%d seeds [", thr_wins, kProtocolSeeds) +
                      wins_detail(p, "thr_only", "rgb_only", true) +
                      fmt("]; need >= %d each; protocol %.0f s (budget %.0f s, shared with criterion 6)",
                          kProtocolWinsNeeded, p.seconds, kProtocolBudget)};
}

Verdict ablation_direction() {
  const auto& p = protocol();
  const int wins =
      count_wins(p, [](const auto& r) { return r.at("fused").overall_abs_rel <= r.at("concat").overall_abs_rel; });
  return {wins >= kProtocolWinsNeeded && p.seconds < kProtocolBudget,
          fmt("overall AbsRel egfusion <= concat in %d/%d seeds (need >= %d) [", wins, kProtocolSeeds,
              kProtocolWinsNeeded) +
              wins_detail(p, "fused", "concat", false) + "]"};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict reproducibility() {
  const auto t0 = std::chrono::steady_clock::now();
  verify::ScratchDir dir("rtfusion_accept_repro");
  Dataset ds;
  ds.train = generate_split(500, 2);
  ds.val = generate_split(600, 1);
  const ModelConfig cfg;
  const auto run = [&](const std::string& name, std::int64_t steps, std::optional<fs::path> resume = std::nullopt) {
    FitOptions opt;
    opt.steps = steps;
    opt.out = dir.path() / name;
    opt.resume_from = resume;
    fit(ds, cfg, opt);
    return dir.path() / name;
  };
  const auto a = run("a", kReproSteps), b = run("b", kReproSteps);
  const auto half = run("half", kReproSteps / 2);
  const auto resumed = run("resumed", kReproSteps, half);
  const auto same = [](const fs::path& x, const fs::path& y) {
    return file_bytes(x / kLossCsv) == file_bytes(y / kLossCsv) &&
           file_bytes(x / kModelBlob) == file_bytes(y / kModelBlob) &&
           file_bytes(x / kModelManifest) == file_bytes(y / kModelManifest);
  };
  const bool repeat = same(a, b), resume = same(a, resumed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {repeat && resume && secs < kReproBudget,
          fmt("two runs bit-identical: %s; resume at step %lld matches unbroken %lld-step run: %s; %.1f s (budget %.0f "
              "s)",
              repeat ? "yes" : "no", static_cast<long long>(kReproSteps / 2), static_cast<long long>(kReproSteps),
              resume ? "yes" : "no", secs, kReproBudget)};
}

int run_cli(const std::vector<std::string>& args) {
  std::string cmd = RTFUSION_CLI_PATH;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict formats() {
  const auto report = verify::format_suite();
  verify::ScratchDir dir("rtfusion_accept_formats");
  const auto& root = dir.path();
  const auto t0 = std::chrono::steady_clock::now();

  ModelConfig cfg;
  cfg.height = cfg.width = cfg.thr_height = cfg.thr_width = 32;
  cfg.rgb_encoder.stage_widths = cfg.thr_encoder.stage_widths = {8, 16, 16, 32};
  cfg.decoder.stage_widths = {16, 8, 8};
  save_checkpoint(root / "ck", build_params(cfg), cfg, 0, nullptr);
  SceneSpec spec;
  spec.height = spec.width = 32;
  spec.thr_downsample = 1;
  const SamplePair s = generate(spec, 1, Scenario::day);
  write_sample(root / "good", s);
  DatasetPlan plan;
  plan.train = 0;
  plan.val = 1;
  plan.scenarios = {Scenario::day};
  write_dataset(root / "data", plan, spec);

  std::string wrong;
  int cases = 0;
  const auto expect2 = [&](const std::string& label, const std::vector<std::string>& args) {
    ++cases;
    const int code = run_cli(args);
    if (code != 2) wrong += fmt(" %s->%d", label.c_str(), code);
  };
  const std::string out = (root / "out.pfm").string();
  for (const auto& f : verify::malformed_ppm_files()) {
    verify::write_raw(root / f.name, f.bytes);
    expect2(f.name, {"predict", "--checkpoint", (root / "ck").string(), "--rgb", (root / f.name).string(), "--thr",
                     (root / "good" / "thr.pgm").string(), "--out", out});
  }
  for (const auto& f : verify::malformed_pgm_files()) {
    verify::write_raw(root / f.name, f.bytes);
    expect2(f.name, {"predict", "--checkpoint", (root / "ck").string(), "--rgb", (root / "good" / "rgb.ppm").string(),
                     "--thr", (root / f.name).string(), "--out", out});
  }
  const auto depth_file = root / "data" / sample_dir(Scenario::day, 0) / "depth.pfm";
  for (const auto& f : verify::malformed_pfm_files()) {
    verify::write_raw(depth_file, f.bytes);
    expect2(f.name, {"eval", "--oracle-pred", "--data", (root / "data").string(), "--report",
                     (root / "r.json").string()});
  }
  const double cli_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool passed = report.passed() && wrong.empty() && report.seconds < kFormatBudget;
  return {passed, describe_suite(report, kFormatBudget) +
                      fmt("; CLI exit code 2 for %d/%d malformed files", cases - static_cast<int>(std::count(
                                                                                       wrong.begin(), wrong.end(), '>')),
                          cases) +
                      (wrong.empty() ? "" : " (wrong:" + wrong + ")") + fmt(" in %.1f s", cli_secs)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradcheck suite", [] { return suite_verdict(verify::gradcheck_suite(), kGradcheckBudget); }},
      {2, "metric oracle", [] { return suite_verdict(verify::metric_oracle_suite(), kMetricBudget); }},
      {3, "attention/edge invariants", [] { return suite_verdict(verify::invariant_suite(), kInvariantBudget); }},
      {4, "overfit sanity", overfit},
      {5, "fusion trend on night", fusion_trend},
      {6, "ablation direction", ablation_direction},
      {7, "reproducibility", reproducibility},
      {8, "format round trips", formats},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("uncaught exception: ") + e.what()};
    }
    failed += v.passed ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", v.passed ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
