#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rtfusion/checkpoint.hpp"
#include "rtfusion/data.hpp"
#include "rtfusion/image_io.hpp"
#include "rtfusion/verify/fixtures.hpp"
#include "rtfusion/verify/suite.hpp"

namespace rtfusion::verify {

inline bool bits_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.data()[i]) != std::bit_cast<std::uint32_t>(b.data()[i])) return false;
  }
  return true;
}

inline void write_raw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

/// Malformed files the readers must reject with DataError, keyed by name.
struct MalformedFile {
  std::string name;
  std::string bytes;
};

inline std::vector<MalformedFile> malformed_ppm_files() {
  using namespace std::string_literals;
  return {{"bad_magic.ppm", "P3\n1 1\n255\n\x01\x02\x03"s},
          {"truncated.ppm", "P6\n2 2\n255\n\x01\x02\x03"s},
          {"bad_width.ppm", "P6\nx 2\n255\n"s},
          {"zero_width.ppm", "P6\n0 2\n255\n"s},
          {"deep.ppm", "P6\n1 1\n65535\n\0\0\0\0\0\0"s},
          {"empty.ppm", ""s}};
}

inline std::vector<MalformedFile> malformed_pgm_files() {
  using namespace std::string_literals;
  return {{"truncated.pgm", "P5\n2 1\n65535\n\x01\x02\x03"s},
          {"bad_magic.pgm", "P2\n1 1\n255\n7"s},
          {"big_maxval.pgm", "P5\n1 1\n70000\n\0\0\0"s},
          {"empty.pgm", ""s}};
}

inline std::vector<MalformedFile> malformed_pfm_files() {
  using namespace std::string_literals;
  return {{"color.pfm", "PF\n1 1\n-1.0\n"s},
          {"bad_scale.pfm", "Pf\n1 1\nabc\n\0\0\0\0"s},
          {"zero_scale.pfm", "Pf\n1 1\n0\n\0\0\0\0"s},
          {"truncated.pfm", "Pf\n2 2\n-1.0\n\0\0\0\0"s}};
}

/// PFM losslessness, PGM/PPM quantization bounds, rejection of malformed
/// images, and bit-exact checkpoint and dataset round trips.
inline SuiteReport format_suite() {
  return run_suite("formats", [](SuiteReport& rep) {
    ScratchDir dir("rtfusion_formats");
    const auto& root = dir.path();
    Rng rng(8);

    Tensor<float> depth = random_tensor<float>(Shape{1, 1, 13, 17}, rng, -1e3, 1e3);
    auto dd = depth.data_mut();
    dd[0] = 0.0f;
    dd[1] = -0.0f;
    dd[2] = std::numeric_limits<float>::denorm_min();
    dd[3] = std::numeric_limits<float>::max();
    dd[4] = std::numeric_limits<float>::infinity();
    dd[5] = std::nextafter(1.0f, 2.0f);
    io::write_pfm(root / "d.pfm", depth);
    rep.add("PFM round trip is bit-exact (incl. -0, denormal, max, inf)",
            bits_equal(io::read_pfm(root / "d.pfm"), depth));

    Tensor<float> gray = random_tensor<float>(Shape{1, 1, 9, 11}, rng, 0.0, 1.0);
    gray.data_mut()[0] = 1.0f;
    gray.data_mut()[1] = 0.0f;
    io::write_pgm16(root / "g.pgm", gray);
    std::ifstream raw(root / "g.pgm", std::ios::binary);
    const std::string bytes{std::istreambuf_iterator<char>(raw), std::istreambuf_iterator<char>()};
    const std::string header = "P5\n11 9\n65535\n";
    const bool endpoint = bytes.compare(0, header.size(), header) == 0 && bytes.size() >= header.size() + 4 &&
                          static_cast<unsigned char>(bytes[header.size()]) == 0xff &&
                          static_cast<unsigned char>(bytes[header.size() + 1]) == 0xff &&
                          bytes[header.size() + 2] == 0 && bytes[header.size() + 3] == 0;
    rep.add("PGM stores 1.0 as 65535 and 0.0 as 0", endpoint);
    const Tensor<float> gray_back = io::read_pgm(root / "g.pgm");
    double pgm_err = 0.0;
    bool pgm_exact = true;
    for (std::int64_t i = 0; i < gray.numel(); ++i) {
      const double stored = std::round(static_cast<double>(gray.data()[i]) * 65535.0);
      pgm_exact = pgm_exact && gray_back.data()[i] == static_cast<float>(stored / 65535.0);
      pgm_err = std::max(pgm_err, std::abs(static_cast<double>(gray_back.data()[i]) - gray.data()[i]));
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "max error %.3e (bound %.3e)", pgm_err, 0.5 / 65535.0);
    rep.add("PGM decodes to round(v*65535)/65535, error <= half a step", pgm_exact && pgm_err <= 0.5 / 65535.0 + 1e-7,
            buf);

    const Tensor<float> rgb = random_tensor<float>(Shape{1, 3, 7, 5}, rng, 0.0, 1.0);
    io::write_ppm(root / "c.ppm", rgb);
    const Tensor<float> rgb_back = io::read_ppm(root / "c.ppm");
    double ppm_err = 0.0;
    for (std::int64_t i = 0; i < rgb.numel(); ++i) {
      ppm_err = std::max(ppm_err, std::abs(static_cast<double>(rgb_back.data()[i]) - rgb.data()[i]));
    }
    std::snprintf(buf, sizeof buf, "max error %.3e (bound %.3e)", ppm_err, 1.0 / 255.0);
    rep.add("PPM round-trip error <= 1/255 per channel", rgb_back.shape() == rgb.shape() && ppm_err <= 1.0 / 255.0,
            buf);
    io::write_ppm(root / "c2.ppm", rgb_back);
    rep.add("PPM re-encode of decoded values is lossless", bits_equal(io::read_ppm(root / "c2.ppm"), rgb_back));

    const auto rejects = [&](const std::vector<MalformedFile>& files,
                             const std::function<Tensor<float>(const std::filesystem::path&)>& reader) {
      std::string accepted;
      for (const auto& f : files) {
        write_raw(root / f.name, f.bytes);
        try {
          reader(root / f.name);
          accepted += " " + f.name;
        } catch (const DataError&) {
        }
      }
      return accepted;
    };
    for (const auto& [kind, files, reader] :
         {std::tuple{"PPM", malformed_ppm_files(), std::function<Tensor<float>(const std::filesystem::path&)>(io::read_ppm)},
          std::tuple{"PGM", malformed_pgm_files(), std::function<Tensor<float>(const std::filesystem::path&)>(io::read_pgm)},
          std::tuple{"PFM", malformed_pfm_files(), std::function<Tensor<float>(const std::filesystem::path&)>(io::read_pfm)}}) {
      const std::string accepted = rejects(files, reader);
      rep.add(std::string("malformed ") + kind + " files rejected", accepted.empty(),
              accepted.empty() ? std::to_string(files.size()) + " files" : "accepted:" + accepted);
    }

    ModelConfig cfg;
    cfg.height = cfg.width = cfg.thr_height = cfg.thr_width = 32;
    cfg.rgb_encoder.stage_widths = cfg.thr_encoder.stage_widths = {8, 16, 16, 32};
    cfg.decoder.stage_widths = {16, 8, 8};
    cfg.seed = 21;
    const auto ps = build_params(cfg);
    AdamState opt = AdamState::zeros_like(ps);
    opt.t = 7;
    for (auto& m : opt.m)
      for (auto& v : m) v = static_cast<float>(rng.normal());
    save_checkpoint(root / "ck", ps, cfg, 7, &opt);
    const Checkpoint ck = load_checkpoint(root / "ck");
    bool same = ck.step == 7 && ck.params.size() == ps.size() && ck.optimizer && ck.optimizer->t == 7 &&
                ck.optimizer->m == opt.m && config_hash(ck.config) == config_hash(cfg);
    for (std::size_t i = 0; same && i < ps.size(); ++i) same = bits_equal(ck.params.tensors()[i], ps.tensors()[i]);
    const auto blob_bytes = std::filesystem::file_size(root / "ck" / kModelBlob);
    rep.add("checkpoint round trip is bit-exact and blob = 4 x parameter count",
            same && blob_bytes == static_cast<std::uintmax_t>(ps.total_numel()) * 4,
            std::to_string(blob_bytes) + " bytes for " + std::to_string(ps.total_numel()) + " parameters");
    std::filesystem::resize_file(root / "ck" / kModelBlob, blob_bytes - 4);
    bool truncated_rejected = false;
    try {
      load_checkpoint(root / "ck");
    } catch (const DataError&) {
      truncated_rejected = true;
    }
    rep.add("truncated checkpoint blob rejected", truncated_rejected);

    SceneSpec spec;
    spec.height = spec.width = 32;
    const SamplePair s = generate(spec, 5, Scenario::night);
    write_sample(root / "sample", s);
    const SamplePair back = read_sample(root / "sample", Scenario::night, 5);
    bool thr_ok = back.thr.shape() == s.thr.shape();
    for (std::int64_t i = 0; thr_ok && i < s.thr.numel(); ++i) {
      thr_ok = std::abs(back.thr.data()[i] - s.thr.data()[i]) <= 0.5 / 65535.0 + 1e-7;
    }
    rep.add("dataset sample round trip: depth and mask exact, thr within PGM bound",
            bits_equal(back.depth, s.depth) && bits_equal(back.mask, s.mask) && thr_ok);
  });
}

}  // namespace rtfusion::verify
