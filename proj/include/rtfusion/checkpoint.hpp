#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtfusion/config.hpp"
#include "rtfusion/errors.hpp"
#include "rtfusion/model.hpp"
#include "rtfusion/optim.hpp"

namespace rtfusion {

inline constexpr const char* kModelManifest = "model.json";
inline constexpr const char* kModelBlob = "model.bin";
inline constexpr const char* kOptimizerBlob = "optimizer.bin";

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
  std::int64_t step = 0;
  std::optional<AdamState> optimizer;
};

namespace detail {

inline void append_f32_le(std::vector<unsigned char>& out, std::span<const float> values) {
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
  }
}

inline void read_f32_le(const std::vector<unsigned char>& in, std::size_t offset, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(in[offset + 4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
}

inline void write_binary(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::vector<unsigned char> read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Writes model.json (manifest) and model.bin (little-endian f32 weights in
/// manifest order), plus optimizer.bin (m then v) when a state is given.
inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& ps, const ModelConfig& cfg,
                            std::int64_t step, const AdamState* optimizer = nullptr) {
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  std::vector<unsigned char> blob;
  blob.reserve(static_cast<std::size_t>(ps.total_numel()) * 4);
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& t = ps.tensors()[i];
    const Shape& s = t.shape();
    params.push_back({{"name", ps.names()[i]}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += t.numel() * 4;
    detail::append_f32_le(blob, t.data());
  }
  nlohmann::json manifest{{"format", "rtfusion-checkpoint"},
                          {"version", 1},
                          {"dtype", "f32"},
                          {"byte_order", "little"},
                          {"step", step},
                          {"config_hash", config_hash(cfg)},
                          {"config", to_json_value(cfg)},
                          {"blob", kModelBlob},
                          {"blob_bytes", offset},
                          {"params", params}};
  if (optimizer != nullptr) {
    if (optimizer->m.size() != ps.size()) throw ShapeError("save_checkpoint: optimizer state does not match parameters");
    std::vector<unsigned char> opt;
    for (const auto& m : optimizer->m) detail::append_f32_le(opt, m);
    for (const auto& v : optimizer->v) detail::append_f32_le(opt, v);
    manifest["optimizer"] = {{"kind", "adam"}, {"t", optimizer->t}, {"blob", kOptimizerBlob}};
    detail::write_binary(dir / kOptimizerBlob, opt);
  }
  detail::write_binary(dir / kModelBlob, blob);
  std::ofstream out(dir / kModelManifest, std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / kModelManifest).string());
  out << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kModelManifest;
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing checkpoint manifest: " + manifest_path.string());
  Checkpoint ck;
  nlohmann::json m;
  try {
    in >> m;
    if (m.at("format") != "rtfusion-checkpoint" || m.at("dtype") != "f32") {
      throw DataError(manifest_path.string() + ": not an f32 rtfusion checkpoint");
    }
    ck.config = config_from_json(m.at("config"));
    ck.step = m.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  if (m.at("config_hash").get<std::string>() != config_hash(ck.config)) {
    throw DataError(manifest_path.string() + ": config hash does not match the stored config");
  }
  // The manifest must describe exactly the layout this config builds.
  ck.params = build_params(ck.config);
  const auto& entries = m.at("params");
  if (entries.size() != ck.params.size()) throw DataError(manifest_path.string() + ": parameter count mismatch");
  const auto blob = detail::read_binary(dir / kModelBlob);
  if (blob.size() != static_cast<std::size_t>(ck.params.total_numel()) * 4) {
    throw DataError((dir / kModelBlob).string() + ": expected " + std::to_string(ck.params.total_numel() * 4) +
                    " bytes, found " + std::to_string(blob.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    auto& t = ck.params.tensors()[i];
    const auto& e = entries[i];
    const Shape& s = t.shape();
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    if (e.at("name").get<std::string>() != ck.params.names()[i] || shape != std::vector<std::int64_t>{s.n, s.c, s.h, s.w} ||
        e.at("offset").get<std::size_t>() != offset) {
      throw DataError(manifest_path.string() + ": parameter " + std::to_string(i) + " ('" +
                      e.at("name").get<std::string>() + "') does not match the configured layout");
    }
    detail::read_f32_le(blob, offset, t.data_mut());
    offset += static_cast<std::size_t>(t.numel()) * 4;
  }
  if (m.contains("optimizer")) {
    const auto bytes = detail::read_binary(dir / kOptimizerBlob);
    if (bytes.size() != blob.size() * 2) throw DataError((dir / kOptimizerBlob).string() + ": unexpected size");
    AdamState st = AdamState::zeros_like(ck.params);
    st.t = m.at("optimizer").at("t").get<std::int64_t>();
    std::size_t off = 0;
    for (auto* moments : {&st.m, &st.v}) {
      for (auto& buf : *moments) {
        detail::read_f32_le(bytes, off, buf);
        off += buf.size() * 4;
      }
    }
    ck.optimizer = std::move(st);
  }
  return ck;
}

}  // namespace rtfusion
