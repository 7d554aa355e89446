#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "rtfusion/config.hpp"
#include "rtfusion/params.hpp"

namespace rtfusion {

/// First and second moment estimates, one buffer per parameter in store order.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t t = 0;

  static AdamState zeros_like(const ParamStore<float>& ps) {
    AdamState s;
    for (const auto& p : ps.tensors()) {
      s.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
      s.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }
    return s;
  }
};

/// Global L2 norm over all parameter gradients (missing gradients count as zero).
inline double grad_global_norm(const ParamStore<float>& ps) {
  double sq = 0.0;
  for (const auto& p : ps.tensors()) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// One Adam update with optional clipping of the global gradient norm.
/// Parameters without a gradient are updated as if it were zero. Returns the
/// pre-clip norm.
inline double adam_step(ParamStore<float>& ps, AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != ps.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  const double norm = grad_global_norm(ps);
  const float scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;
  ++state.t;
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto one_minus_b1 = static_cast<float>(1.0 - cfg.beta1);
  const auto one_minus_b2 = static_cast<float>(1.0 - cfg.beta2);
  const auto correction1 = static_cast<float>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const auto correction2 = static_cast<float>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const auto lr = static_cast<float>(cfg.lr);
  const auto eps = static_cast<float>(cfg.eps);
  using Arr = Eigen::Array<float, Eigen::Dynamic, 1>;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Tensor<float>& p = ps.tensors()[k];
    const auto n = static_cast<Eigen::Index>(p.numel());
    Eigen::Map<Arr> data(p.data_mut().data(), n);
    Eigen::Map<Arr> m(state.m[k].data(), n);
    Eigen::Map<Arr> v(state.v[k].data(), n);
    if (p.has_grad()) {
      const Arr g = Eigen::Map<const Arr>(p.grad().data(), n) * scale;
      m = b1 * m + one_minus_b1 * g;
      v = b2 * v + one_minus_b2 * g.square();
    } else {
      m = b1 * m;
      v = b2 * v;
    }
    data -= lr * (m / correction1) / ((v / correction2).sqrt() + eps);
  }
  return norm;
}

}  // namespace rtfusion
