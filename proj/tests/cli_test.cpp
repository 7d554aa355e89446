#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rtfusion/ablation.hpp"
#include "rtfusion/cli.hpp"
#include "rtfusion/colormap.hpp"
#include "rtfusion/manifest.hpp"
#include "test_util.hpp"

namespace rtfusion {
namespace {

namespace fs = std::filesystem;
using testing::bit_equal;
using testing::read_bytes;
using testing::TempDir;
using testing::write_bytes;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "rtfusion");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = c.width = 32;
  c.thr_height = c.thr_width = 32;
  c.rgb_encoder.stage_widths = {8, 16, 16, 32};
  c.thr_encoder.stage_widths = {8, 16, 16, 32};
  c.decoder.stage_widths = {16, 8, 8};
  c.train.batch_size = 2;
  c.seed = 4;
  return c;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  nlohmann::json j;
  in >> j;
  return j;
}

// A 32x32 dataset and a matching config file shared by the tests.
class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto r = run({"gen-data", "--out", data().string(), "--train", "2", "--val", "1", "--size", "32",
                        "--thr-downsample", "1", "--seed", "50"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ofstream(config()) << to_json_value(tiny_config()).dump(2);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static fs::path data() { return root() / "data"; }
  static fs::path config() { return root() / "tiny.json"; }

  static TempDir* dir_;
};
TempDir* CliFixture::dir_ = nullptr;

// ----- usage -----

TEST(CliUsage, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"train", "--steps", "1"}).code, 1);
  EXPECT_EQ(run({"train", "--data", "x", "--out", "y", "--steps", "-3"}).code, 1);
  EXPECT_EQ(run({"eval", "--data", "x", "--report", "r.json"}).code, 1);
}

// ----- gen-data -----

TEST(CliGenData, CountsLayoutAndIdempotence) {
  TempDir dir;
  const auto a = dir.path() / "a";
  ASSERT_EQ(run({"gen-data", "--out", a.string(), "--train", "8", "--val", "4", "--size", "32", "--seed", "3"}).code, 0);
  std::set<std::string> samples;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file() && e.path().filename() == "depth.pfm") samples.insert(e.path().parent_path().string());
  }
  EXPECT_EQ(samples.size(), 36u);
  EXPECT_TRUE(fs::exists(a / "index.json"));
  EXPECT_TRUE(fs::exists(a / kRunManifest));

  const auto b = dir.path() / "b";
  ASSERT_EQ(run({"gen-data", "--out", b.string(), "--train", "8", "--val", "4", "--size", "32", "--seed", "3"}).code, 0);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == kRunManifest) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(read_bytes(e.path()), read_bytes(b / rel)) << rel;
  }
}

TEST(CliGenData, BadScenarioIsUsageError) {
  TempDir dir;
  const auto r = run({"gen-data", "--out", (dir.path() / "x").string(), "--scenarios", "day,fog"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("fog"), std::string::npos);
}

// ----- train -----

TEST_F(CliFixture, TrainZeroStepsWritesInitialization) {
  const auto out = root() / "run0";
  const auto r = run({"train", "--config", config().string(), "--data", data().string(), "--steps", "0", "--out",
                      out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint ck = load_checkpoint(out);
  const auto init = build_params(tiny_config());
  ASSERT_EQ(ck.params.size(), init.size());
  for (std::size_t i = 0; i < init.size(); ++i) EXPECT_TRUE(bit_equal(ck.params.tensors()[i], init.tensors()[i]));
  EXPECT_EQ(read_bytes(out / kLossCsv), std::string(kLossCsvHeader) + "\n");
}

TEST_F(CliFixture, TrainIsReproducibleAndWritesManifest) {
  const auto a = root() / "ra", b = root() / "rb";
  for (const auto& out : {a, b}) {
    const auto r = run({"train", "--config", config().string(), "--data", data().string(), "--steps", "3", "--out",
                        out.string(), "--set", "train.lr=0.002"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(read_bytes(a / kLossCsv), read_bytes(b / kLossCsv));
  EXPECT_EQ(read_bytes(a / kModelBlob), read_bytes(b / kModelBlob));
  EXPECT_EQ(read_loss_csv(a / kLossCsv).size(), 3u);

  ModelConfig expected = tiny_config();
  expected.train.lr = 0.002;
  const auto m = read_json(a / kRunManifest);
  EXPECT_EQ(m.at("config_hash"), config_hash(expected));
  EXPECT_EQ(m.at("seed"), expected.seed);
  EXPECT_EQ(m.at("output"), a.string());
  EXPECT_NE(m.at("command").get<std::string>().find("train"), std::string::npos);
  EXPECT_TRUE(std::regex_match(m.at("timestamp").get<std::string>(),
                               std::regex(R"(\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ)")));
}

TEST_F(CliFixture, TrainResumeMatchesUnbrokenRun) {
  const auto full = root() / "full", part = root() / "part", resumed = root() / "resumed";
  const std::vector<std::string> base{"train", "--config", config().string(), "--data", data().string()};
  auto with = [&](std::vector<std::string> extra) {
    auto v = base;
    v.insert(v.end(), extra.begin(), extra.end());
    return run(v);
  };
  ASSERT_EQ(with({"--steps", "4", "--out", full.string()}).code, 0);
  ASSERT_EQ(with({"--steps", "2", "--out", part.string()}).code, 0);
  ASSERT_EQ(with({"--steps", "4", "--out", resumed.string(), "--resume", part.string()}).code, 0);
  EXPECT_EQ(read_bytes(full / kLossCsv), read_bytes(resumed / kLossCsv));
  EXPECT_EQ(read_bytes(full / kModelBlob), read_bytes(resumed / kModelBlob));
}

TEST_F(CliFixture, TrainDataErrors) {
  const auto r = run({"train", "--data", (root() / "missing").string(), "--steps", "1", "--out", (root() / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing"), std::string::npos);
  // Default config expects 64x64 input; the dataset is 32x32.
  EXPECT_EQ(run({"train", "--data", data().string(), "--steps", "1", "--out", (root() / "y").string()}).code, 2);
  write_bytes(root() / "broken.json", "{\"train\": ");
  EXPECT_EQ(run({"train", "--config", (root() / "broken.json").string(), "--data", data().string(), "--steps", "1",
                 "--out", (root() / "z").string()})
                .code,
            2);
  EXPECT_EQ(run({"train", "--config", config().string(), "--data", data().string(), "--steps", "1", "--out",
                 (root() / "w").string(), "--set", "fusion.mode=sideways"})
                .code,
            1);
}

// ----- eval -----

TEST_F(CliFixture, EvalOracleGivesPerfectMetricsAndSchema) {
  const auto report = root() / "oracle" / "report.json";
  const auto r = run({"eval", "--oracle-pred", "--data", data().string(), "--report", report.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(report);
  EXPECT_EQ(j.at("format"), cli::kReportFormat);
  EXPECT_EQ(j.at("version"), 1);
  EXPECT_EQ(j.at("split"), "val");
  EXPECT_TRUE(j.at("checkpoint").is_null());
  EXPECT_EQ(j.at("columns"), nlohmann::json(metric_columns()));
  for (const char* key : {"day", "night", "rain", "overall"}) {
    const auto rep = j.at("metrics").at(key).get<MetricsReport>();
    EXPECT_EQ(rep.abs_rel, 0.0) << key;
    EXPECT_EQ(rep.sq_rel, 0.0);
    EXPECT_EQ(rep.rmse, 0.0);
    EXPECT_EQ(rep.rmse_log, 0.0);
    EXPECT_EQ(rep.delta1, 1.0);
    EXPECT_EQ(rep.delta2, 1.0);
    EXPECT_EQ(rep.delta3, 1.0);
    EXPECT_GT(rep.valid_pixels, 0);
  }
  EXPECT_TRUE(fs::exists(cli::sidecar_manifest(report)));

  // Header in AbsRel, SqRel, RMSE, RMSE(log), a1, a2, a3 order; overall last.
  std::istringstream lines(r.out);
  std::string header, last, line;
  std::getline(lines, header);
  while (std::getline(lines, line)) last = line;
  std::size_t pos = 0;
  for (const auto& col : metric_columns()) {
    const auto at = header.find(col, pos);
    ASSERT_NE(at, std::string::npos) << col;
    pos = at + col.size();
  }
  EXPECT_EQ(last.rfind("overall", 0), 0u);
}

TEST_F(CliFixture, EvalCheckpointMatchesLibrary) {
  const auto out = root() / "evalrun";
  ASSERT_EQ(run({"train", "--config", config().string(), "--data", data().string(), "--steps", "2", "--out",
                 out.string()})
                .code,
            0);
  const auto report = root() / "eval.json";
  ASSERT_EQ(run({"eval", "--checkpoint", out.string(), "--data", data().string(), "--report", report.string()}).code, 0);
  const auto ck = load_checkpoint(out);
  const auto expected = evaluate_model(load_dataset(data()).val, ck.params, ck.config);
  const auto j = read_json(report);
  EXPECT_EQ(j.at("step"), 2);
  EXPECT_EQ(j.at("metrics").at("overall").at("abs_rel").get<double>(), expected.at(kOverall).abs_rel);
  EXPECT_EQ(run({"eval", "--checkpoint", (root() / "nope").string(), "--data", data().string(), "--report",
                 report.string()})
                .code,
            2);
}

// ----- predict -----

TEST_F(CliFixture, PredictDimsDeterminismAndVisualization) {
  const auto out = root() / "predrun";
  ASSERT_EQ(run({"train", "--config", config().string(), "--data", data().string(), "--steps", "1", "--out",
                 out.string()})
                .code,
            0);
  const auto sample = data() / "night" / "50";
  const auto p1 = root() / "p1.pfm", p2 = root() / "p2.pfm", vis = root() / "p1.ppm";
  for (const auto& p : {p1, p2}) {
    const auto r = run({"predict", "--checkpoint", out.string(), "--rgb", (sample / "rgb.ppm").string(), "--thr",
                        (sample / "thr.pgm").string(), "--out", p.string(), "--png-vis", vis.string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto depth = io::read_pfm(p1);
  EXPECT_EQ(depth.shape(), (Shape{1, 1, 32, 32}));
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
  EXPECT_EQ(io::read_ppm(vis).shape(), (Shape{1, 3, 32, 32}));
  EXPECT_TRUE(fs::exists(cli::sidecar_manifest(p1)));
  for (float v : depth.data()) {
    EXPECT_GE(v, 0.1f);
    EXPECT_LE(v, 80.0f);
  }

  write_bytes(root() / "bad.ppm", std::string("P6\n32 32\n255\n\x01\x02", 15));
  EXPECT_EQ(run({"predict", "--checkpoint", out.string(), "--rgb", (root() / "bad.ppm").string(), "--thr",
                 (sample / "thr.pgm").string(), "--out", (root() / "x.pfm").string()})
                .code,
            2);
  // Size mismatch between the image and the checkpoint's config.
  io::write_ppm(root() / "small.ppm", Tensor<float>(Shape{1, 3, 16, 16}, 0.5f));
  EXPECT_EQ(run({"predict", "--checkpoint", out.string(), "--rgb", (root() / "small.ppm").string(), "--thr",
                 (sample / "thr.pgm").string(), "--out", (root() / "x.pfm").string()})
                .code,
            2);
  EXPECT_EQ(run({"predict", "--checkpoint", out.string(), "--rgb", (sample / "rgb.ppm").string(), "--out",
                 (root() / "x.pfm").string()})
                .code,
            1);
}

// ----- ablate -----

TEST(Ablation, VariantListMatchesPrunedMatrix) {
  const auto variants = ablation_variants(ModelConfig{});
  std::vector<std::string> names;
  for (const auto& v : variants) names.push_back(v.name);
  const std::vector<std::string> expected{
      "fused/egfusion/mca/esem-learned",    "fused/egfusion/mca/esem-sobel",    "fused/egfusion/mca/esem-none",
      "fused/egfusion/no-mca/esem-learned", "fused/egfusion/no-mca/esem-sobel", "fused/egfusion/no-mca/esem-none",
      "fused/concat",                       "rgb_only/egfusion/mca",            "rgb_only/egfusion/no-mca",
      "rgb_only/concat",                    "thr_only/egfusion/mca",            "thr_only/egfusion/no-mca",
      "thr_only/concat"};
  EXPECT_EQ(names, expected);
  std::set<std::string> hashes;
  for (const auto& v : variants) {
    EXPECT_NO_THROW(v.config.validate());
    hashes.insert(config_hash(v.config));
  }
  EXPECT_EQ(hashes.size(), variants.size());
}

TEST_F(CliFixture, AblateSortsAndVerifiesBatchSequence) {
  const auto out = root() / "abl";
  const auto r = run({"ablate", "--config", config().string(), "--data", data().string(), "--steps", "2", "--out",
                      out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(out / cli::kAblationJson);
  ASSERT_EQ(j.at("variants").size(), 13u);
  EXPECT_EQ(j.at("batch_hash").get<std::string>().size(), 40u);
  double prev = -1.0;
  for (const auto& v : j.at("variants")) {
    const double a = v.at("reports").at("overall").at("abs_rel").get<double>();
    EXPECT_LE(prev, a);
    prev = a;
    EXPECT_TRUE(fs::exists(out / variant_slug(v.at("variant").get<std::string>()) / kModelManifest));
  }
  // Every block of the text table is sorted by its AbsRel column.
  std::istringstream lines(read_bytes(out / cli::kAblationTable));
  std::string line;
  int blocks = 0;
  while (std::getline(lines, line)) {
    if (line.starts_with("[")) {
      ++blocks;
      std::getline(lines, line);  // header
      prev = -1.0;
      continue;
    }
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name;
    double abs_rel = 0.0;
    fields >> name >> abs_rel;
    EXPECT_LE(prev, abs_rel) << line;
    prev = abs_rel;
  }
  EXPECT_EQ(blocks, 4);
}

TEST(Ablation, ParallelAndSequentialAgree) {
  SceneSpec spec;
  spec.height = spec.width = 32;
  spec.thr_downsample = 1;
  Dataset ds;
  for (Scenario sc : {Scenario::day, Scenario::night}) {
    ds.train.push_back(generate(spec, 1, sc));
    ds.train.push_back(generate(spec, 2, sc));
    ds.val.push_back(generate(spec, 3, sc));
  }
  auto variants = ablation_variants(tiny_config());
  variants.resize(3);
  const auto seq = run_ablation(ds, variants, 2, std::nullopt, false);
  const auto par = run_ablation(ds, variants, 2, std::nullopt, true);
  ASSERT_EQ(seq.rows.size(), par.rows.size());
  EXPECT_EQ(seq.batch_hash, par.batch_hash);
  for (std::size_t i = 0; i < seq.rows.size(); ++i) {
    EXPECT_EQ(seq.rows[i].variant, par.rows[i].variant);
    EXPECT_EQ(seq.rows[i].reports.at(kOverall).abs_rel, par.rows[i].reports.at(kOverall).abs_rel);
  }
}

TEST(Ablation, TableOrdersBlocksAndRows) {
  const auto rep = [](double a) {
    MetricsReport r;
    r.abs_rel = a;
    r.valid_pixels = 1;
    return r;
  };
  const std::vector<AblationRow> rows{
      {"b", "", "", {{"overall", rep(0.3)}, {"night", rep(0.1)}}},
      {"a", "", "", {{"overall", rep(0.2)}, {"night", rep(0.4)}}},
  };
  const std::string t = ablation_table(rows);
  const auto overall = t.find("[overall]"), night = t.find("[night]");
  ASSERT_NE(overall, std::string::npos);
  ASSERT_NE(night, std::string::npos);
  EXPECT_LT(overall, night);
  EXPECT_LT(t.find("\na "), t.find("\nb "));
  EXPECT_LT(t.find("\nb ", night), t.find("\na ", night));
}

// ----- selfcheck -----

TEST(CliSelfcheck, CleanBuildPassesWithPerSuiteTiming) {
  TempDir dir;
  const auto r = run({"selfcheck", "--out", dir.path().string()});
  EXPECT_EQ(r.code, 0) << r.out;
  for (const char* suite : {"gradcheck", "metric-oracle", "invariants", "formats"}) {
    EXPECT_TRUE(std::regex_search(r.out, std::regex(std::string("PASS ") + suite + R"(\s+\d+ checks\s+[0-9.]+ s)")))
        << suite << "\n"
        << r.out;
  }
  EXPECT_TRUE(read_json(dir.path() / cli::kSelfcheckJson).at("passed").get<bool>());
  EXPECT_TRUE(fs::exists(dir.path() / kRunManifest));
}

TEST(CliSelfcheck, InjectedMetricBugFails) {
  const auto r = run({"selfcheck", "--inject-metric-bug"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("FAIL metric-oracle"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("PASS gradcheck"), std::string::npos);
}

// ----- support -----

TEST(Colormap, EndpointsAndClamping) {
  const auto lo = ramp_color(0.0), hi = ramp_color(1.0);
  EXPECT_FLOAT_EQ(lo[0], 48.0f / 255.0f);
  EXPECT_FLOAT_EQ(hi[0], 122.0f / 255.0f);
  EXPECT_EQ(ramp_color(-5.0), lo);
  EXPECT_EQ(ramp_color(7.0), hi);
  const auto mid = ramp_color(0.5);
  EXPECT_FLOAT_EQ(mid[1], 250.0f / 255.0f);
  EXPECT_THROW(colorize_depth(Tensor<float>(Shape{1, 1, 2, 2}), 1.0, 1.0), ShapeError);
}

TEST(Manifest, HashIsGitBlobOfCanonicalConfig) {
  RunManifest m;
  m.config = to_json_value(tiny_config());
  EXPECT_EQ(m.config_hash(), config_hash(tiny_config()));
  EXPECT_EQ(m.to_json().at("config_hash"), config_hash(tiny_config()));
}

}  // namespace
}  // namespace rtfusion
