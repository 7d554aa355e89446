#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtfusion/errors.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion {

// Depth accuracy summary over valid pixels. delta_k is the fraction of pixels
// with max(pred/gt, gt/pred) < 1.25^k.
struct MetricsReport {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::int64_t valid_pixels = 0;
  std::string scenario;
};

inline constexpr double kDeltaBase = 1.25;

/// Metrics over pixels with mask != 0. Rejects empty masks, nonpositive ground
/// truth, and nonpositive or non-finite predictions inside the mask.
inline MetricsReport evaluate(std::span<const double> pred, std::span<const double> gt,
                              std::span<const double> mask, std::string scenario = {}) {
  if (pred.size() != gt.size() || pred.size() != mask.size()) {
    throw ShapeError("evaluate: prediction, ground truth and mask sizes differ");
  }
  double abs_rel = 0.0, sq_rel = 0.0, sq = 0.0, sq_log = 0.0;
  std::int64_t n = 0, d1 = 0, d2 = 0, d3 = 0;
  const double t1 = kDeltaBase, t2 = kDeltaBase * kDeltaBase, t3 = kDeltaBase * kDeltaBase * kDeltaBase;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double y = gt[i];
    const double p = pred[i];
    if (!(y > 0.0) || !std::isfinite(y)) {
      throw DataError("evaluate: ground truth must be positive inside the mask (pixel " + std::to_string(i) + ")");
    }
    if (!(p > 0.0) || !std::isfinite(p)) {
      throw NumericalError("evaluate: prediction must be positive and finite (pixel " + std::to_string(i) + ")");
    }
    const double diff = y - p;
    const double rel = diff / y;
    abs_rel += std::abs(rel);
    sq_rel += rel * rel;
    sq += diff * diff;
    const double dl = std::log1p(y) - std::log1p(p);
    sq_log += dl * dl;
    const double r = std::max(p / y, y / p);
    d1 += r < t1;
    d2 += r < t2;
    d3 += r < t3;
    ++n;
  }
  if (n == 0) throw DataError("evaluate: mask has no valid pixels");
  const double inv = 1.0 / static_cast<double>(n);
  MetricsReport r;
  r.abs_rel = abs_rel * inv;
  r.sq_rel = sq_rel * inv;
  r.rmse = std::sqrt(sq * inv);
  r.rmse_log = std::sqrt(sq_log * inv);
  r.delta1 = static_cast<double>(d1) * inv;
  r.delta2 = static_cast<double>(d2) * inv;
  r.delta3 = static_cast<double>(d3) * inv;
  r.valid_pixels = n;
  r.scenario = std::move(scenario);
  return r;
}

template <typename T>
MetricsReport evaluate(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, std::string scenario = {}) {
  if (!(pred.shape() == gt.shape()) || !(pred.shape() == mask.shape())) {
    throw ShapeError("evaluate: shapes differ " + pred.shape().str() + " / " + gt.shape().str() + " / " +
                     mask.shape().str());
  }
  const std::vector<double> p(pred.data().begin(), pred.data().end());
  const std::vector<double> g(gt.data().begin(), gt.data().end());
  const std::vector<double> m(mask.data().begin(), mask.data().end());
  return evaluate(p, g, m, std::move(scenario));
}

/// Pixel-weighted pooling. Means pool by valid-pixel counts, RMSE-type
/// metrics pool their squares before the root, deltas pool as counts.
inline MetricsReport pool(std::span<const MetricsReport> reports, std::string scenario) {
  if (reports.empty()) throw DataError("aggregate: empty report group '" + scenario + "'");
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0, d1 = 0, d2 = 0, d3 = 0;
  std::int64_t n = 0;
  for (const auto& r : reports) {
    const auto w = static_cast<double>(r.valid_pixels);
    abs_rel += r.abs_rel * w;
    sq_rel += r.sq_rel * w;
    sq += r.rmse * r.rmse * w;
    sq_log += r.rmse_log * r.rmse_log * w;
    d1 += r.delta1 * w;
    d2 += r.delta2 * w;
    d3 += r.delta3 * w;
    n += r.valid_pixels;
  }
  if (n == 0) throw DataError("aggregate: group '" + scenario + "' has no valid pixels");
  const double inv = 1.0 / static_cast<double>(n);
  MetricsReport out;
  out.abs_rel = abs_rel * inv;
  out.sq_rel = sq_rel * inv;
  out.rmse = std::sqrt(sq * inv);
  out.rmse_log = std::sqrt(sq_log * inv);
  out.delta1 = d1 * inv;
  out.delta2 = d2 * inv;
  out.delta3 = d3 * inv;
  out.valid_pixels = n;
  out.scenario = std::move(scenario);
  return out;
}

inline const std::string kOverall = "overall";

/// One pooled report per scenario tag, plus "overall" across all reports.
inline std::map<std::string, MetricsReport> aggregate(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DataError("aggregate: no reports");
  std::map<std::string, std::vector<MetricsReport>> groups;
  for (const auto& r : reports) groups[r.scenario].push_back(r);
  std::map<std::string, MetricsReport> out;
  for (auto& [tag, group] : groups) out.emplace(tag, pool(group, tag));
  out.emplace(kOverall, pool(reports, kOverall));
  return out;
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"scenario", r.scenario}, {"valid_pixels", r.valid_pixels}, {"abs_rel", r.abs_rel},
                     {"sq_rel", r.sq_rel},     {"rmse", r.rmse},                 {"rmse_log", r.rmse_log},
                     {"delta1", r.delta1},     {"delta2", r.delta2},             {"delta3", r.delta3}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("scenario").get_to(r.scenario);
  j.at("valid_pixels").get_to(r.valid_pixels);
  j.at("abs_rel").get_to(r.abs_rel);
  j.at("sq_rel").get_to(r.sq_rel);
  j.at("rmse").get_to(r.rmse);
  j.at("rmse_log").get_to(r.rmse_log);
  j.at("delta1").get_to(r.delta1);
  j.at("delta2").get_to(r.delta2);
  j.at("delta3").get_to(r.delta3);
}

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"AbsRel", "SqRel", "RMSE", "RMSE(log)", "a1", "a2", "a3"};
  return cols;
}

/// Aligned text table; metric columns follow the usual AbsRel..a3 order.
/// `label` names the first column.
inline std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                                const std::string& label = "scenario") {
  std::size_t first = label.size();
  for (const auto& [name, _] : rows) first = std::max(first, name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(first)) << label;
  for (const auto& c : metric_columns()) os << "  " << std::right << std::setw(9) << c;
  os << "  " << std::right << std::setw(9) << "pixels" << '\n';
  os << std::fixed;
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(static_cast<int>(first)) << name << std::right << std::setprecision(4);
    for (double v : {r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3}) {
      os << "  " << std::setw(9) << v;
    }
    os << "  " << std::setw(9) << r.valid_pixels << '\n';
  }
  return os.str();
}

}  // namespace rtfusion
