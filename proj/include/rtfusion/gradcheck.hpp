#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rtfusion/tensor.hpp"

namespace rtfusion {

struct GradcheckResult {
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_index = -1;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return std::isfinite(max_rel_error) && max_rel_error < tolerance; }
};

struct GradcheckOptions {
  double step = 1e-3;
  double denominator_floor = 1e-6;
  // 0 checks every entry; otherwise at most this many evenly strided entries per input.
  std::int64_t max_entries_per_input = 0;
};

// Compares backward() against central differences of loss_fn. loss_fn maps the
// inputs to a scalar tensor and must be deterministic.
template <typename LossFn>
GradcheckResult gradcheck(LossFn&& loss_fn, std::vector<Tensor<double>> inputs,
                          const GradcheckOptions& opts = {}) {
  for (auto& t : inputs) {
    t.requires_grad_(true);
    t.zero_grad();
  }
  {
    Tensor<double> loss = loss_fn(inputs);
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0));
  }

  GradcheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].data_mut();
    const auto n = static_cast<std::int64_t>(values.size());
    std::int64_t stride = 1;
    if (opts.max_entries_per_input > 0 && n > opts.max_entries_per_input) {
      stride = (n + opts.max_entries_per_input - 1) / opts.max_entries_per_input;
    }
    for (std::int64_t i = 0; i < n; i += stride) {
      const auto ui = static_cast<std::size_t>(i);
      const double saved = values[ui];
      values[ui] = saved + opts.step;
      const double up = loss_fn(inputs).item();
      values[ui] = saved - opts.step;
      const double down = loss_fn(inputs).item();
      values[ui] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[k][ui];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = rel;
        result.analytic_at_worst = a;
        result.numeric_at_worst = numeric;
        result.worst_input = k;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace rtfusion
