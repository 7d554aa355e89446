#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "rtfusion/ops.hpp"
#include "rtfusion/rng.hpp"
#include "rtfusion/tensor.hpp"
#include "rtfusion/verify/fixtures.hpp"

namespace rtfusion::testing {

using verify::random_tensor;
using verify::weighted_sum;

// Direct-summation convolution over the zero-padded window.
inline std::vector<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                                        const std::vector<double>& bias, int stride, int pad,
                                        int groups, Shape& out_shape) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const std::int64_t ho = (xs.h + 2 * pad - ws.h) / stride + 1;
  const std::int64_t wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  out_shape = Shape{xs.n, ws.n, ho, wo};
  std::vector<double> out(static_cast<std::size_t>(out_shape.numel()), 0.0);
  const std::int64_t cout_g = ws.n / groups;
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < ws.n; ++co) {
      const std::int64_t g = co / cout_g;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < ws.c; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky;
                const std::int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += w.at(co, ci, ky, kx) * x.at(n, g * ws.c + ci, iy, ix);
              }
          out[static_cast<std::size_t>(((n * ws.n + co) * ho + oy) * wo + ox)] = acc;
        }
    }
  return out;
}

using TempDir = verify::ScratchDir;

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.data()[i]) != std::bit_cast<std::uint32_t>(b.data()[i])) return false;
  }
  return true;
}

}  // namespace rtfusion::testing
