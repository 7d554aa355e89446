#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>
#include <openssl/evp.h>

#include "rtfusion/backbone.hpp"
#include "rtfusion/decoder.hpp"
#include "rtfusion/egfusion.hpp"
#include "rtfusion/errors.hpp"
#include "rtfusion/loss.hpp"

namespace rtfusion {

enum class Modality { fused, rgb_only, thr_only };

struct TrainConfig {
  std::int64_t batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
  bool augment = true;
  std::int64_t val_every = 0;  // 0: validate only after the last step
};

struct ModelConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t thr_height = 32;
  std::int64_t thr_width = 32;
  EncoderConfig rgb_encoder{};
  EncoderConfig thr_encoder = [] {
    EncoderConfig c;
    c.in_channels = 1;
    return c;
  }();
  FusionConfig fusion{};
  DecoderConfig decoder{};
  LossWeights loss{};
  Modality modality = Modality::fused;
  std::uint64_t seed = 0;
  TrainConfig train{};

  /// Fusion settings actually used: single-modality runs carry no edge gate.
  FusionConfig effective_fusion() const {
    FusionConfig f = fusion;
    if (modality != Modality::fused) f.esem_mode = EsemMode::none;
    return f;
  }

  void validate() const {
    const auto dims = [](std::int64_t h, std::int64_t w, const char* what) {
      if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0) {
        throw ShapeError(std::string(what) + " size " + std::to_string(h) + "x" + std::to_string(w) +
                         " must be a positive multiple of 32 in each dimension");
      }
    };
    dims(height, width, "input");
    dims(thr_height, thr_width, "thr input");
    if (rgb_encoder.in_channels != 3) throw ShapeError("rgb encoder must take 3 channels");
    if (thr_encoder.in_channels != 1) throw ShapeError("thr encoder must take 1 channel");
    rgb_encoder.validate();
    thr_encoder.validate();
    if (rgb_encoder.stage_widths[1] != thr_encoder.stage_widths[1] ||
        rgb_encoder.stage_widths[3] != thr_encoder.stage_widths[3]) {
      throw ShapeError("rgb and thr encoders must agree on the fused stage widths (stages 1 and 3)");
    }
    if (fusion.attn_downsample_stride < 1) throw ShapeError("fusion.attn_stride must be >= 1");
    decoder.validate();
    loss.validate();
    if (train.batch_size < 1) throw ShapeError("train.batch_size must be >= 1");
    if (!(train.lr >= 0.0)) throw ShapeError("train.lr must be >= 0");
    if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0)) {
      throw ShapeError("train betas must lie in [0, 1)");
    }
    if (!(train.eps > 0.0)) throw ShapeError("train.eps must be > 0");
    if (!(train.grad_clip >= 0.0)) throw ShapeError("train.grad_clip must be >= 0");
    if (train.val_every < 0) throw ShapeError("train.val_every must be >= 0");
  }
};

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::fused: return "fused";
    case Modality::rgb_only: return "rgb_only";
    case Modality::thr_only: return "thr_only";
  }
  return "?";
}
inline const char* to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "egfusion"; }
inline const char* to_string(EsemMode m) {
  switch (m) {
    case EsemMode::learned: return "learned";
    case EsemMode::sobel: return "sobel";
    case EsemMode::none: return "none";
  }
  return "?";
}

NLOHMANN_JSON_SERIALIZE_ENUM(Modality, {{Modality::fused, "fused"},
                                        {Modality::rgb_only, "rgb_only"},
                                        {Modality::thr_only, "thr_only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FusionMode, {{FusionMode::egfusion, "egfusion"}, {FusionMode::concat, "concat"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EsemMode, {{EsemMode::learned, "learned"},
                                        {EsemMode::sobel, "sobel"},
                                        {EsemMode::none, "none"}})

inline nlohmann::json to_json_value(const ModelConfig& c) {
  using nlohmann::json;
  const auto enc = [](const EncoderConfig& e) {
    return json{{"stage_widths", e.stage_widths}, {"stage_depths", e.stage_depths}};
  };
  return json{
      {"input", {{"height", c.height}, {"width", c.width}, {"thr_height", c.thr_height}, {"thr_width", c.thr_width}}},
      {"rgb_encoder", enc(c.rgb_encoder)},
      {"thr_encoder", enc(c.thr_encoder)},
      {"fusion",
       {{"mode", c.fusion.mode},
        {"mca", c.fusion.mca_enabled},
        {"esem", c.fusion.esem_mode},
        {"attn_stride", c.fusion.attn_downsample_stride}}},
      {"decoder",
       {{"stage_widths", c.decoder.stage_widths},
        {"skip", c.decoder.skip_enabled},
        {"d_min", c.decoder.d_min},
        {"d_max", c.decoder.d_max},
        {"head_init_std", c.decoder.head_init_std}}},
      {"loss", {{"lambda1", c.loss.lambda1}, {"lambda2", c.loss.lambda2}}},
      {"modality", c.modality},
      {"seed", c.seed},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"lr", c.train.lr},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"grad_clip", c.train.grad_clip},
        {"augment", c.train.augment},
        {"val_every", c.train.val_every}}}};
}

namespace detail {

// Every key in `given` must exist in `schema`; objects recurse, everything else is a leaf.
inline void check_known_keys(const nlohmann::json& schema, const nlohmann::json& given, const std::string& path) {
  if (!given.is_object()) throw ShapeError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string sub = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ShapeError("config: unknown key '" + sub + "'");
    if (schema.at(key).is_object()) check_known_keys(schema.at(key), value, sub);
  }
}

}  // namespace detail

/// Parses a possibly partial config; omitted keys take their defaults and
/// unknown keys are rejected.
inline ModelConfig config_from_json(const nlohmann::json& given) {
  nlohmann::json j = to_json_value(ModelConfig{});
  detail::check_known_keys(j, given, "");
  j.merge_patch(given);
  ModelConfig c;
  try {
    const auto& in = j.at("input");
    in.at("height").get_to(c.height);
    in.at("width").get_to(c.width);
    in.at("thr_height").get_to(c.thr_height);
    in.at("thr_width").get_to(c.thr_width);
    for (auto [key, enc] : {std::pair{"rgb_encoder", &c.rgb_encoder}, std::pair{"thr_encoder", &c.thr_encoder}}) {
      j.at(key).at("stage_widths").get_to(enc->stage_widths);
      j.at(key).at("stage_depths").get_to(enc->stage_depths);
    }
    const auto& f = j.at("fusion");
    f.at("mode").get_to(c.fusion.mode);
    f.at("mca").get_to(c.fusion.mca_enabled);
    f.at("esem").get_to(c.fusion.esem_mode);
    f.at("attn_stride").get_to(c.fusion.attn_downsample_stride);
    const auto& d = j.at("decoder");
    d.at("stage_widths").get_to(c.decoder.stage_widths);
    d.at("skip").get_to(c.decoder.skip_enabled);
    d.at("d_min").get_to(c.decoder.d_min);
    d.at("d_max").get_to(c.decoder.d_max);
    d.at("head_init_std").get_to(c.decoder.head_init_std);
    j.at("loss").at("lambda1").get_to(c.loss.lambda1);
    j.at("loss").at("lambda2").get_to(c.loss.lambda2);
    j.at("modality").get_to(c.modality);
    j.at("seed").get_to(c.seed);
    const auto& t = j.at("train");
    t.at("batch_size").get_to(c.train.batch_size);
    t.at("lr").get_to(c.train.lr);
    t.at("beta1").get_to(c.train.beta1);
    t.at("beta2").get_to(c.train.beta2);
    t.at("eps").get_to(c.train.eps);
    t.at("grad_clip").get_to(c.train.grad_clip);
    t.at("augment").get_to(c.train.augment);
    t.at("val_every").get_to(c.train.val_every);
  } catch (const nlohmann::json::exception& e) {
    throw ShapeError(std::string("config: ") + e.what());
  }
  // Enum strings that match no value deserialize to the first enumerator; catch them.
  if (to_json_value(c) != j) {
    for (const char* key : {"modality"}) {
      if (j.at(key) != to_json_value(c).at(key)) throw ShapeError(std::string("config: invalid ") + key);
    }
    for (const char* key : {"mode", "esem"}) {
      if (j.at("fusion").at(key) != to_json_value(c).at("fusion").at(key)) {
        throw ShapeError(std::string("config: invalid fusion.") + key);
      }
    }
  }
  c.validate();
  return c;
}

/// Sets one leaf addressed by a dotted path, e.g. "train.lr". The value is
/// parsed as JSON when possible and otherwise taken as a string.
inline void set_config_leaf(nlohmann::json& j, const std::string& path, const std::string& raw) {
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty() || path.empty()) throw ShapeError("config override has an empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) *node = nlohmann::json::object();
    node = &(*node)[parts[i]];
  }
  if (!node->is_object()) *node = nlohmann::json::object();
  (*node)[parts.back()] = value;
}

/// Canonical text: sorted keys, no whitespace.
inline std::string canonical_json(const ModelConfig& c) { return to_json_value(c).dump(); }

/// SHA-1 over "blob <len>\0<content>", as git hashes file contents.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string framed = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string config_hash(const ModelConfig& c) { return git_blob_sha1(canonical_json(c)); }

}  // namespace rtfusion
