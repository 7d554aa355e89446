#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtfusion/config.hpp"
#include "rtfusion/errors.hpp"
#include "rtfusion/metrics.hpp"
#include "rtfusion/parallel.hpp"
#include "rtfusion/train.hpp"

namespace rtfusion {

struct AblationVariant {
  std::string name;
  ModelConfig config;
};

/// The pruned variant matrix. Concat fusion has no attention or edge gate, and
/// single-modality runs have no edge gate, so those axes collapse:
///   fused:    egfusion x mca {on, off} x esem {learned, sobel, none}, plus concat
///   rgb_only: egfusion x mca {on, off}, plus concat
///   thr_only: egfusion x mca {on, off}, plus concat
inline std::vector<AblationVariant> ablation_variants(const ModelConfig& base) {
  std::vector<AblationVariant> out;
  const auto add = [&](Modality m, FusionMode f, bool mca, EsemMode e) {
    ModelConfig c = base;
    c.modality = m;
    c.fusion.mode = f;
    c.fusion.mca_enabled = mca;
    c.fusion.esem_mode = e;
    std::string name = std::string(to_string(m)) + "/" + to_string(f);
    if (f == FusionMode::egfusion) {
      name += mca ? "/mca" : "/no-mca";
      if (m == Modality::fused) name += std::string("/esem-") + to_string(e);
    }
    out.push_back({name, c});
  };
  for (bool mca : {true, false}) {
    for (EsemMode e : {EsemMode::learned, EsemMode::sobel, EsemMode::none}) add(Modality::fused, FusionMode::egfusion, mca, e);
  }
  add(Modality::fused, FusionMode::concat, false, EsemMode::none);
  for (Modality m : {Modality::rgb_only, Modality::thr_only}) {
    add(m, FusionMode::egfusion, true, EsemMode::none);
    add(m, FusionMode::egfusion, false, EsemMode::none);
    add(m, FusionMode::concat, false, EsemMode::none);
  }
  return out;
}

struct AblationRow {
  std::string variant;
  std::string config_hash;
  std::string batch_hash;
  std::map<std::string, MetricsReport> reports;  // per scenario plus "overall"
};

struct AblationResult {
  std::vector<AblationRow> rows;  // sorted by overall AbsRel, ascending
  std::string batch_hash;
};

/// Directory-safe form of a variant name.
inline std::string variant_slug(const std::string& name) {
  std::string s = name;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

/// One block per scenario (overall first), rows sorted by AbsRel ascending.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::string> groups{kOverall};
  for (const auto& row : rows) {
    for (const auto& [k, _] : row.reports) {
      if (std::find(groups.begin(), groups.end(), k) == groups.end()) groups.push_back(k);
    }
  }
  std::string out;
  for (const auto& g : groups) {
    std::vector<std::pair<std::string, MetricsReport>> block;
    for (const auto& row : rows) {
      const auto it = row.reports.find(g);
      if (it != row.reports.end()) block.emplace_back(row.variant, it->second);
    }
    std::stable_sort(block.begin(), block.end(),
                     [](const auto& a, const auto& b) { return a.second.abs_rel < b.second.abs_rel; });
    if (!out.empty()) out += '\n';
    out += "[" + g + "]\n" + format_table(block, "variant");
  }
  return out;
}

inline nlohmann::json ablation_json(const AblationResult& r, std::int64_t steps) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json reports = nlohmann::json::object();
    for (const auto& [k, rep] : row.reports) reports[k] = rep;
    rows.push_back({{"variant", row.variant}, {"config_hash", row.config_hash}, {"reports", reports}});
  }
  return {{"steps", steps}, {"batch_hash", r.batch_hash}, {"variants", rows}};
}

/// Trains every variant for `steps` on the same data and batch schedule and
/// evaluates it on the validation split. Each variant's run directory is
/// out/<slug>. With `parallel`, variants run on up to thread_limit() threads;
/// results do not depend on that choice.
inline AblationResult run_ablation(const Dataset& data, const std::vector<AblationVariant>& variants,
                                   std::int64_t steps, const std::optional<std::filesystem::path>& out,
                                   bool parallel) {
  if (data.val.empty()) throw DataError("ablation needs a validation split");
  std::vector<AblationRow> rows(variants.size());
  const auto run_one = [&](std::int64_t i) {
    const auto& v = variants[static_cast<std::size_t>(i)];
    FitOptions opt;
    opt.steps = steps;
    if (out) opt.out = *out / variant_slug(v.name);
    const FitResult fr = fit(data, v.config, opt);
    rows[static_cast<std::size_t>(i)] = {v.name, config_hash(v.config), fr.batch_hash, fr.validation.back().reports};
  };
  const auto n = static_cast<std::int64_t>(variants.size());
  if (parallel) {
    parallel_for(n, run_one);
  } else {
    for (std::int64_t i = 0; i < n; ++i) run_one(i);
  }
  AblationResult res;
  for (const auto& row : rows) {
    if (res.batch_hash.empty()) res.batch_hash = row.batch_hash;
    if (row.batch_hash != res.batch_hash) {
      throw DataError("variant " + row.variant + " trained on a different batch sequence (" + row.batch_hash +
                      " vs " + res.batch_hash + ")");
    }
  }
  res.rows = std::move(rows);
  std::stable_sort(res.rows.begin(), res.rows.end(), [](const AblationRow& a, const AblationRow& b) {
    return a.reports.at(kOverall).abs_rel < b.reports.at(kOverall).abs_rel;
  });
  return res;
}

}  // namespace rtfusion
