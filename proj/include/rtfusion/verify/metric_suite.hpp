#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rtfusion/metrics.hpp"
#include "rtfusion/rng.hpp"
#include "rtfusion/verify/metric_oracle.hpp"
#include "rtfusion/verify/suite.hpp"

namespace rtfusion::verify {

inline constexpr double kMetricTolerance = 1e-12;
inline constexpr int kMetricDraws = 1000;

using EvaluateFn =
    std::function<MetricsReport(std::span<const double>, std::span<const double>, std::span<const double>)>;

inline MetricsReport library_evaluate(std::span<const double> p, std::span<const double> g, std::span<const double> m) {
  return evaluate(p, g, m);
}

/// Mutation fixture for selfcheck: AbsRel divided by the prediction instead of
/// the ground truth. Every other metric is left intact.
inline MetricsReport evaluate_with_injected_bug(std::span<const double> p, std::span<const double> g,
                                                std::span<const double> m) {
  MetricsReport r = evaluate(p, g, m);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] != 0.0) acc += std::abs(g[i] - p[i]) / p[i];
  }
  r.abs_rel = acc / static_cast<double>(r.valid_pixels);
  return r;
}

struct MetricCase {
  std::vector<double> pred, gt, mask;
};

/// Positive depths in [0.5, 80], log-normal prediction error, about 70% valid
/// pixels with at least one valid.
inline MetricCase random_metric_case(Rng& rng) {
  const auto n = static_cast<std::size_t>(rng.uniform_int(1, 200));
  MetricCase c{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    c.gt[i] = rng.uniform(0.5, 80.0);
    c.pred[i] = c.gt[i] * std::exp(rng.normal(0.0, 0.4));
    c.mask[i] = rng.bernoulli(0.7) ? 1.0 : 0.0;
  }
  c.mask[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1))] = 1.0;
  return c;
}

namespace detail {

inline double max_metric_gap(const MetricsReport& r, const NaiveMetrics& o) {
  const double gaps[] = {std::abs(r.abs_rel - o.abs_rel), std::abs(r.sq_rel - o.sq_rel), std::abs(r.rmse - o.rmse),
                         std::abs(r.rmse_log - o.rmse_log), std::abs(r.delta1 - o.d1),   std::abs(r.delta2 - o.d2),
                         std::abs(r.delta3 - o.d3)};
  double m = r.valid_pixels == o.count ? 0.0 : INFINITY;
  for (double g : gaps) m = std::max(m, std::isnan(g) ? INFINITY : g);
  return m;
}

inline std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

}  // namespace detail

/// Compares `eval` against the naive oracle on random masked arrays and
/// against the hand-worked examples.
inline SuiteReport metric_oracle_suite(const EvaluateFn& eval = library_evaluate, int draws = kMetricDraws) {
  return run_suite("metric-oracle", [&](SuiteReport& rep) {
    Rng rng(2024);
    double worst = 0.0;
    int worst_case = -1;
    for (int t = 0; t < draws; ++t) {
      const auto c = random_metric_case(rng);
      const double gap = detail::max_metric_gap(eval(c.pred, c.gt, c.mask), naive_metrics(c.pred, c.gt, c.mask));
      if (!(gap <= worst)) {
        worst = gap;
        worst_case = t;
      }
    }
    rep.add(std::to_string(draws) + " random masked arrays vs naive oracle", worst <= kMetricTolerance,
            detail::fmt("max |diff| %.3e (case %.0f)", worst, worst_case));

    using V = std::vector<double>;
    const V y{1.0, 2.5, 7.0, 40.0};
    const auto perfect = eval(y, y, V(4, 1.0));
    rep.add("pred = gt gives zero errors and unit deltas",
            perfect.abs_rel == 0.0 && perfect.sq_rel == 0.0 && perfect.rmse == 0.0 && perfect.rmse_log == 0.0 &&
                perfect.delta1 == 1.0 && perfect.delta2 == 1.0 && perfect.delta3 == 1.0,
            detail::fmt("abs_rel %.17g rmse %.17g", perfect.abs_rel, perfect.rmse));

    const auto arith = eval(V{2, 1, 3}, V{1, 2, 4}, V{1, 1, 1});
    rep.add("gt [1,2,4] pred [2,1,3]: AbsRel 0.58333, RMSE 1",
            std::abs(arith.abs_rel - 1.75 / 3.0) <= 1e-15 && std::abs(arith.abs_rel - 0.58333) < 5e-6 && arith.rmse == 1.0,
            detail::fmt("abs_rel %.17g rmse %.17g", arith.abs_rel, arith.rmse));

    const auto deltas = eval(V{1.2, 1.3, 2.0}, V{1, 1, 1}, V{1, 1, 1});
    rep.add("gt [1,1,1] pred [1.2,1.3,2.0]: deltas 1/3, 2/3, 2/3",
            deltas.delta1 == 1.0 / 3.0 && deltas.delta2 == 2.0 / 3.0 && deltas.delta3 == 2.0 / 3.0,
            detail::fmt("d1 %.17g d2 %.17g", deltas.delta1, deltas.delta2) + detail::fmt(" d3 %.17g", deltas.delta3));
  });
}

}  // namespace rtfusion::verify
