#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

// Straight-line reference for the depth metrics, written independently of
// rtfusion/metrics.hpp. Used by selfcheck and the test suites to cross-check
// evaluate(). Do not share code with the library implementation.
namespace rtfusion::verify {

struct NaiveMetrics {
  double abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3;
  long count;
};

inline NaiveMetrics naive_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                                  const std::vector<double>& mask) {
  std::vector<double> ys, ps;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (mask[i] != 0.0) {
      ys.push_back(gt[i]);
      ps.push_back(pred[i]);
    }
  }
  const double n = static_cast<double>(ys.size());
  NaiveMetrics m{0, 0, 0, 0, 0, 0, 0, static_cast<long>(ys.size())};
  double se = 0, sle = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    m.abs_rel += std::fabs((ys[i] - ps[i]) / ys[i]) / n;
    m.sq_rel += std::pow((ys[i] - ps[i]) / ys[i], 2) / n;
    se += std::pow(ys[i] - ps[i], 2);
    sle += std::pow(std::log(ys[i] + 1.0) - std::log(ps[i] + 1.0), 2);
    const double ratio = ps[i] > ys[i] ? ps[i] / ys[i] : ys[i] / ps[i];
    if (ratio < 1.25) m.d1 += 1.0;
    if (ratio < 1.5625) m.d2 += 1.0;
    if (ratio < 1.953125) m.d3 += 1.0;
  }
  m.rmse = std::sqrt(se / n);
  m.rmse_log = std::sqrt(sle / n);
  m.d1 /= n;
  m.d2 /= n;
  m.d3 /= n;
  return m;
}

}  // namespace rtfusion::verify
