#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace rtfusion {

/// Worker-thread cap from RTFUSION_THREADS (default 1).
inline int thread_limit() {
  static const int limit = [] {
    const char* env = std::getenv("RTFUSION_THREADS");
    if (env == nullptr) return 1;
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      return 1;
    }
  }();
  return limit;
}

// Runs fn(i) for i in [0, n). Each index must write disjoint outputs; callers
// that reduce across indices do so afterwards in index order, so results never
// depend on the number of threads.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int threads = static_cast<int>(std::min<std::int64_t>(thread_limit(), n));
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::int64_t i = t; i < n; i += threads) fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace rtfusion
