#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "rtfusion/errors.hpp"
#include "rtfusion/tensor.hpp"

// Binary Netpbm (P6 RGB, P5 16-bit gray) and PFM (Pf) readers and writers for
// single images stored as (1, C, H, W) float tensors.
namespace rtfusion::io {

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const std::vector<unsigned char>& payload) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

// Tokenizer over a Netpbm-style ASCII header with '#' comments.
class HeaderReader {
 public:
  HeaderReader(const std::vector<unsigned char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::string token() {
    skip_space_and_comments();
    std::string t;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_])) t.push_back(static_cast<char>(bytes_[pos_++]));
    if (t.empty()) fail("unexpected end of header");
    return t;
  }

  std::int64_t positive_int(const char* what) {
    const std::string t = token();
    std::int64_t v = 0;
    for (char ch : t) {
      if (!std::isdigit(static_cast<unsigned char>(ch))) fail(std::string("invalid ") + what + " '" + t + "'");
      v = v * 10 + (ch - '0');
      if (v > (1LL << 30)) fail(std::string(what) + " too large");
    }
    if (v <= 0) fail(std::string(what) + " must be positive");
    return v;
  }

  // Exactly one whitespace byte separates the header from the payload.
  std::size_t payload_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace after header");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw DataError(path_ + ": malformed header: " + msg); }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void require_payload(const std::vector<unsigned char>& bytes, std::size_t offset, std::size_t need,
                            const std::string& path) {
  if (bytes.size() < offset + need) {
    throw DataError(path + ": truncated payload (" + std::to_string(bytes.size() - std::min(bytes.size(), offset)) +
                    " of " + std::to_string(need) + " bytes)");
  }
}

inline std::uint32_t quantize(float v, std::uint32_t maxval) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint32_t>(std::lround(c * maxval));
}

template <typename T>
void require_single_image(const Tensor<T>& t, std::int64_t channels, const char* what) {
  if (t.shape().n != 1 || t.shape().c != channels) {
    throw ShapeError(std::string(what) + " expects shape (1," + std::to_string(channels) + ",H,W), got " +
                     t.shape().str());
  }
}

}  // namespace detail

/// 8-bit binary PPM; values are clamped to [0,1] and rounded to 1/255 steps.
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& rgb) {
  detail::require_single_image(rgb, 3, "write_ppm");
  const Shape& s = rgb.shape();
  std::vector<unsigned char> payload(static_cast<std::size_t>(3 * s.plane()));
  for (std::int64_t p = 0; p < s.plane(); ++p)
    for (std::int64_t c = 0; c < 3; ++c)
      payload[static_cast<std::size_t>(3 * p + c)] =
          static_cast<unsigned char>(detail::quantize(rgb.data()[static_cast<std::size_t>(c * s.plane() + p)], 255));
  detail::write_file(path, "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n", payload);
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::HeaderReader hr(bytes, path.string());
  if (hr.token() != "P6") hr.fail("expected magic P6");
  const auto w = hr.positive_int("width");
  const auto h = hr.positive_int("height");
  const auto maxval = hr.positive_int("maxval");
  if (maxval > 255) hr.fail("only 8-bit PPM is supported");
  const std::size_t off = hr.payload_offset();
  detail::require_payload(bytes, off, static_cast<std::size_t>(3 * w * h), path.string());
  Tensor<float> out(Shape{1, 3, h, w});
  auto d = out.data_mut();
  for (std::int64_t p = 0; p < w * h; ++p)
    for (std::int64_t c = 0; c < 3; ++c)
      d[static_cast<std::size_t>(c * w * h + p)] =
          static_cast<float>(bytes[off + static_cast<std::size_t>(3 * p + c)]) / static_cast<float>(maxval);
  return out;
}

/// 16-bit big-endian binary PGM; stored value = round(v * 65535).
inline void write_pgm16(const std::filesystem::path& path, const Tensor<float>& gray) {
  detail::require_single_image(gray, 1, "write_pgm16");
  const Shape& s = gray.shape();
  std::vector<unsigned char> payload(static_cast<std::size_t>(2 * s.plane()));
  for (std::int64_t p = 0; p < s.plane(); ++p) {
    const std::uint32_t q = detail::quantize(gray.data()[static_cast<std::size_t>(p)], 65535);
    payload[static_cast<std::size_t>(2 * p)] = static_cast<unsigned char>(q >> 8);
    payload[static_cast<std::size_t>(2 * p + 1)] = static_cast<unsigned char>(q & 0xff);
  }
  detail::write_file(path, "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n65535\n", payload);
}

/// Reads 8- or 16-bit binary PGM into [0, 1].
inline Tensor<float> read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::HeaderReader hr(bytes, path.string());
  if (hr.token() != "P5") hr.fail("expected magic P5");
  const auto w = hr.positive_int("width");
  const auto h = hr.positive_int("height");
  const auto maxval = hr.positive_int("maxval");
  if (maxval > 65535) hr.fail("maxval exceeds 65535");
  const std::size_t off = hr.payload_offset();
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  detail::require_payload(bytes, off, static_cast<std::size_t>(w * h) * bpp, path.string());
  Tensor<float> out(Shape{1, 1, h, w});
  auto d = out.data_mut();
  for (std::int64_t p = 0; p < w * h; ++p) {
    const std::size_t i = off + static_cast<std::size_t>(p) * bpp;
    const std::uint32_t v = bpp == 2 ? (static_cast<std::uint32_t>(bytes[i]) << 8) | bytes[i + 1] : bytes[i];
    d[static_cast<std::size_t>(p)] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
  }
  return out;
}

/// Grayscale PFM: little-endian f32 (scale -1.0), rows stored bottom-up.
inline void write_pfm(const std::filesystem::path& path, const Tensor<float>& depth) {
  detail::require_single_image(depth, 1, "write_pfm");
  const Shape& s = depth.shape();
  std::vector<unsigned char> payload(static_cast<std::size_t>(4 * s.plane()));
  for (std::int64_t row = 0; row < s.h; ++row) {
    const std::int64_t src_row = s.h - 1 - row;
    for (std::int64_t x = 0; x < s.w; ++x) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(depth.data()[static_cast<std::size_t>(src_row * s.w + x)]);
      unsigned char* dst = payload.data() + 4 * (row * s.w + x);
      for (int b = 0; b < 4; ++b) dst[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
  }
  detail::write_file(path, "Pf\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n-1.0\n", payload);
}

inline Tensor<float> read_pfm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::HeaderReader hr(bytes, path.string());
  const std::string magic = hr.token();
  if (magic == "PF") hr.fail("color PFM is not supported; expected Pf");
  if (magic != "Pf") hr.fail("expected magic Pf");
  const auto w = hr.positive_int("width");
  const auto h = hr.positive_int("height");
  const std::string scale_tok = hr.token();
  double scale = 0.0;
  {
    std::istringstream is(scale_tok);
    if (!(is >> scale) || !is.eof() || scale == 0.0 || !std::isfinite(scale)) hr.fail("invalid scale '" + scale_tok + "'");
  }
  const bool little = scale < 0.0;
  const std::size_t off = hr.payload_offset();
  detail::require_payload(bytes, off, static_cast<std::size_t>(4 * w * h), path.string());
  Tensor<float> out(Shape{1, 1, h, w});
  auto d = out.data_mut();
  for (std::int64_t row = 0; row < h; ++row) {
    const std::int64_t dst_row = h - 1 - row;
    for (std::int64_t x = 0; x < w; ++x) {
      const unsigned char* src = bytes.data() + off + 4 * (row * w + x);
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        const int shift = little ? 8 * b : 8 * (3 - b);
        bits |= static_cast<std::uint32_t>(src[b]) << shift;
      }
      d[static_cast<std::size_t>(dst_row * w + x)] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

}  // namespace rtfusion::io
