#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "rtfusion/ops.hpp"
#include "rtfusion/rng.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion::verify {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(v));
}

// Reduces an arbitrary output to a scalar with fixed random weights so every
// output element contributes a distinct coefficient to the gradient.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<T> w = random_tensor<T>(out.shape(), rng);
  return ops::sum(ops::mul(out, w));
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag = "rtfusion") {
    static std::uint64_t counter = 0;
    const auto id = mix_seed(static_cast<std::uint64_t>(::getpid()), ++counter);
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(id));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace rtfusion::verify
