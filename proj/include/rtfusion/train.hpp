#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "rtfusion/checkpoint.hpp"
#include "rtfusion/config.hpp"
#include "rtfusion/data.hpp"
#include "rtfusion/errors.hpp"
#include "rtfusion/loss.hpp"
#include "rtfusion/metrics.hpp"
#include "rtfusion/model.hpp"
#include "rtfusion/optim.hpp"

namespace rtfusion {

inline constexpr const char* kLossCsv = "losses.csv";
inline constexpr const char* kLossCsvHeader = "step,total,l1,smooth";
inline constexpr const char* kValMetrics = "val_metrics.json";

struct Batch {
  Tensor<float> rgb;    // (B,3,H,W)
  Tensor<float> thr;    // (B,1,Ht,Wt)
  Tensor<float> depth;  // (B,1,H,W)
  Tensor<float> mask;   // (B,1,H,W)
};

namespace detail {

inline Tensor<float> stack(const std::vector<const Tensor<float>*>& parts) {
  const Shape s0 = parts.front()->shape();
  Shape out{static_cast<std::int64_t>(parts.size()), s0.c, s0.h, s0.w};
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(out.numel()));
  for (const auto* t : parts) {
    const Shape& s = t->shape();
    if (s.n != 1 || s.c != s0.c || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("batch: sample shape " + s.str() + " differs from " + s0.str());
    }
    values.insert(values.end(), t->data().begin(), t->data().end());
  }
  return Tensor<float>(out, std::move(values));
}

}  // namespace detail

/// Concatenates single-sample pairs along the batch axis.
inline Batch make_batch(const std::vector<SamplePair>& samples) {
  if (samples.empty()) throw ShapeError("batch: no samples");
  std::vector<const Tensor<float>*> rgb, thr, depth, mask;
  for (const auto& s : samples) {
    rgb.push_back(&s.rgb);
    thr.push_back(&s.thr);
    depth.push_back(&s.depth);
    mask.push_back(&s.mask);
  }
  return {detail::stack(rgb), detail::stack(thr), detail::stack(depth), detail::stack(mask)};
}

/// Stateless batch schedule. Each epoch visits a permutation of the training
/// set drawn from (seed, epoch) and drops the incomplete tail, so the batch for
/// any step is computable without replaying earlier steps.
class BatchSampler {
 public:
  BatchSampler(std::int64_t dataset_size, std::int64_t batch_size, std::uint64_t seed)
      : size_(dataset_size), batch_(batch_size), seed_(seed) {
    if (batch_size < 1) throw ShapeError("batch size must be >= 1");
    if (dataset_size < batch_size) {
      throw DataError("training set has " + std::to_string(dataset_size) + " samples, fewer than batch size " +
                      std::to_string(batch_size));
    }
  }

  std::int64_t batches_per_epoch() const { return size_ / batch_; }

  /// Sample indices for a zero-based step.
  std::vector<std::int64_t> indices(std::int64_t step) const {
    const std::int64_t epoch = step / batches_per_epoch();
    const std::int64_t pos = step % batches_per_epoch();
    if (epoch != cached_epoch_) {
      perm_.resize(static_cast<std::size_t>(size_));
      std::iota(perm_.begin(), perm_.end(), std::int64_t{0});
      Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));
      for (std::int64_t i = size_ - 1; i > 0; --i) {
        std::swap(perm_[static_cast<std::size_t>(i)], perm_[static_cast<std::size_t>(rng.uniform_int(0, i))]);
      }
      cached_epoch_ = epoch;
    }
    const auto first = perm_.begin() + pos * batch_;
    return {first, first + batch_};
  }

  /// Seed for the augmentation of one batch slot.
  std::uint64_t augment_seed(std::int64_t step, std::int64_t slot) const {
    return mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(step) + 0x5eedULL), static_cast<std::uint64_t>(slot));
  }

 private:
  std::int64_t size_;
  std::int64_t batch_;
  std::uint64_t seed_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::int64_t> perm_;
};

/// The batch trained on at a zero-based step, augmentation included.
inline Batch batch_for_step(const std::vector<SamplePair>& train, const BatchSampler& sampler, std::int64_t step,
                            const ModelConfig& cfg) {
  std::vector<SamplePair> picked;
  const auto idx = sampler.indices(step);
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    const SamplePair& s = train[static_cast<std::size_t>(idx[slot])];
    if (cfg.train.augment) {
      AugmentConfig aug;
      aug.crop_height = cfg.height;
      aug.crop_width = cfg.width;
      picked.push_back(augment(s, sampler.augment_seed(step, static_cast<std::int64_t>(slot)), aug));
    } else {
      picked.push_back(s);
    }
  }
  return make_batch(picked);
}

/// Running SHA-1 over the exact batch tensors fed to the model.
class BatchHasher {
 public:
  BatchHasher() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) throw std::runtime_error("SHA-1 init failed");
  }
  void update(const Batch& b) {
    for (const Tensor<float>* t : {&b.rgb, &b.thr, &b.depth, &b.mask}) {
      const auto d = t->data();
      EVP_DigestUpdate(ctx_.get(), d.data(), d.size() * sizeof(float));
    }
  }
  std::string hex() const {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> copy(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    EVP_MD_CTX_copy_ex(copy.get(), ctx_.get());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(copy.get(), digest, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[digest[i] >> 4];
      out += kHex[digest[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

struct StepResult {
  double total = 0.0;
  double l1 = 0.0;
  double smooth = 0.0;
  double grad_norm = 0.0;
};

namespace detail {

inline bool all_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Names the first tensor holding a non-finite value, scanning inputs,
// parameters, prediction and loss terms in that order.
inline std::string first_non_finite(const Batch& b, const ParamStore<float>& ps, const Tensor<float>& pred,
                                    const LossTerms<float>& terms) {
  const std::pair<const char*, const Tensor<float>*> inputs[] = {
      {"input rgb", &b.rgb}, {"input thr", &b.thr}, {"input depth", &b.depth}, {"input mask", &b.mask}};
  for (const auto& [name, t] : inputs) {
    if (!all_finite(t->data())) return name;
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!all_finite(ps.tensors()[i].data())) return "parameter " + ps.names()[i];
  }
  if (!all_finite(pred.data())) return "prediction";
  if (!all_finite(terms.l1.data())) return "loss l1";
  if (!all_finite(terms.smooth.data())) return "loss smooth";
  return "loss total";
}

}  // namespace detail

/// forward, loss, backward and one Adam update. Throws NumericalError naming
/// the first non-finite tensor when the loss or a gradient is not finite; the
/// parameters are left untouched in that case.
inline StepResult train_step(const Batch& batch, ParamStore<float>& ps, AdamState& state, const ModelConfig& cfg) {
  ps.zero_grad();
  const Tensor<float> pred = forward(batch.rgb, batch.thr, ps, cfg);
  const LossTerms<float> terms = loss_terms(pred, batch.depth, batch.mask, batch.rgb, cfg.loss);
  StepResult r{terms.total.item(), terms.l1.item(), terms.smooth.item(), 0.0};
  if (!std::isfinite(r.total) || !std::isfinite(r.l1) || !std::isfinite(r.smooth)) {
    throw NumericalError("non-finite loss (total=" + std::to_string(r.total) +
                         "); first non-finite tensor: " + detail::first_non_finite(batch, ps, pred, terms));
  }
  backward(terms.total);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& p = ps.tensors()[i];
    if (p.has_grad() && !detail::all_finite(p.grad())) {
      throw NumericalError("non-finite gradient for parameter " + ps.names()[i] +
                           "; first non-finite tensor: " + detail::first_non_finite(batch, ps, pred, terms));
    }
  }
  r.grad_norm = adam_step(ps, state, cfg.train);
  return r;
}

/// Depth predictions for a list of samples, batch by batch, without recording
/// a graph.
inline std::vector<Tensor<float>> predict_samples(const std::vector<SamplePair>& samples, const ParamStore<float>& ps,
                                                  const ModelConfig& cfg) {
  NoGradGuard guard;
  std::vector<Tensor<float>> out;
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (std::size_t first = 0; first < samples.size(); first += bs) {
    const std::vector<SamplePair> chunk(samples.begin() + static_cast<std::ptrdiff_t>(first),
                                        samples.begin() + static_cast<std::ptrdiff_t>(std::min(first + bs, samples.size())));
    const Batch b = make_batch(chunk);
    const Tensor<float> pred = forward(b.rgb, b.thr, ps, cfg);
    const Shape& s = pred.shape();
    const auto plane = static_cast<std::size_t>(s.c * s.h * s.w);
    for (std::int64_t n = 0; n < s.n; ++n) {
      const auto begin = pred.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n) * plane);
      out.emplace_back(Shape{1, s.c, s.h, s.w}, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(plane)));
    }
  }
  return out;
}

/// Per-sample reports pooled per scenario and overall.
inline std::map<std::string, MetricsReport> evaluate_predictions(const std::vector<SamplePair>& samples,
                                                                 const std::vector<Tensor<float>>& preds) {
  if (samples.size() != preds.size()) throw ShapeError("evaluate: prediction count differs from sample count");
  std::vector<MetricsReport> reports;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    reports.push_back(evaluate(preds[i], samples[i].depth, samples[i].mask, to_string(samples[i].scenario)));
  }
  return aggregate(reports);
}

inline std::map<std::string, MetricsReport> evaluate_model(const std::vector<SamplePair>& samples,
                                                           const ParamStore<float>& ps, const ModelConfig& cfg) {
  return evaluate_predictions(samples, predict_samples(samples, ps, cfg));
}

struct LossRow {
  std::int64_t step = 0;
  double total = 0.0;
  double l1 = 0.0;
  double smooth = 0.0;
};

inline std::string format_loss_row(const LossRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g", static_cast<long long>(r.step), r.total, r.l1, r.smooth);
  return buf;
}

inline std::vector<LossRow> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kLossCsvHeader) throw DataError(path.string() + ": missing header");
  std::vector<LossRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRow r;
    long long step = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &step, &r.total, &r.l1, &r.smooth) != 4) {
      throw DataError(path.string() + ": malformed row '" + line + "'");
    }
    r.step = step;
    rows.push_back(r);
  }
  return rows;
}

struct FitOptions {
  std::int64_t steps = 0;                    // total steps, counted from initialization
  std::optional<std::filesystem::path> out;  // run directory; nothing is written when empty
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const LossRow&)> on_step;  // progress hook
};

struct ValRecord {
  std::int64_t step = 0;
  std::map<std::string, MetricsReport> reports;
};

struct FitResult {
  ParamStore<float> params;
  AdamState optimizer;
  std::int64_t step = 0;
  std::vector<LossRow> losses;  // every step from 1, including rows inherited on resume
  std::vector<ValRecord> validation;
  std::string batch_hash;  // SHA-1 of the batches trained on in this invocation
};

inline nlohmann::json val_history_json(const std::vector<ValRecord>& history) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : history) {
    nlohmann::json reports = nlohmann::json::object();
    for (const auto& [k, r] : v.reports) reports[k] = r;
    arr.push_back({{"step", v.step}, {"reports", reports}});
  }
  return arr;
}

/// Rejects samples whose image sizes differ from the configured input sizes.
inline void check_dataset_matches(const Dataset& data, const ModelConfig& cfg) {
  for (const auto* split : {&data.train, &data.val}) {
    for (const auto& s : *split) {
      const Shape& r = s.rgb.shape();
      const Shape& t = s.thr.shape();
      if (r.h != cfg.height || r.w != cfg.width || t.h != cfg.thr_height || t.w != cfg.thr_width) {
        throw DataError("sample " + sample_dir(s.scenario, s.seed) + " has rgb " + std::to_string(r.h) + "x" +
                        std::to_string(r.w) + " and thr " + std::to_string(t.h) + "x" + std::to_string(t.w) +
                        ", but the config expects rgb " + std::to_string(cfg.height) + "x" +
                        std::to_string(cfg.width) + " and thr " + std::to_string(cfg.thr_height) + "x" +
                        std::to_string(cfg.thr_width));
      }
    }
  }
}

/// Trains until `opt.steps` and, when an output directory is given, writes the
/// checkpoint, losses.csv and validation metrics there. A resumed run picks up
/// the stored parameters, optimizer moments, step and loss history.
inline FitResult fit(const Dataset& data, const ModelConfig& cfg, const FitOptions& opt) {
  cfg.validate();
  if (opt.steps < 0) throw ShapeError("steps must be >= 0");
  check_dataset_matches(data, cfg);
  FitResult res;
  if (opt.resume_from) {
    Checkpoint ck = load_checkpoint(*opt.resume_from);
    if (config_hash(ck.config) != config_hash(cfg)) {
      throw DataError(opt.resume_from->string() + ": checkpoint config differs from the requested config");
    }
    if (!ck.optimizer) throw DataError(opt.resume_from->string() + ": checkpoint carries no optimizer state");
    if (ck.step > opt.steps) {
      throw DataError(opt.resume_from->string() + ": checkpoint is at step " + std::to_string(ck.step) +
                      ", beyond the requested " + std::to_string(opt.steps));
    }
    res.params = std::move(ck.params);
    res.optimizer = std::move(*ck.optimizer);
    res.step = ck.step;
    for (const auto& row : read_loss_csv(*opt.resume_from / kLossCsv)) {
      if (row.step <= ck.step) res.losses.push_back(row);
    }
    if (static_cast<std::int64_t>(res.losses.size()) != ck.step) {
      throw DataError((*opt.resume_from / kLossCsv).string() + ": loss history does not cover the checkpoint step");
    }
  } else {
    res.params = build_params(cfg);
    res.optimizer = AdamState::zeros_like(res.params);
  }

  BatchHasher hasher;
  if (opt.steps > res.step) {
    const BatchSampler sampler(static_cast<std::int64_t>(data.train.size()), cfg.train.batch_size, cfg.seed);
    for (std::int64_t step = res.step; step < opt.steps; ++step) {
      const Batch batch = batch_for_step(data.train, sampler, step, cfg);
      hasher.update(batch);
      const StepResult r = train_step(batch, res.params, res.optimizer, cfg);
      const LossRow row{step + 1, r.total, r.l1, r.smooth};
      res.losses.push_back(row);
      if (opt.on_step) opt.on_step(row);
      res.step = step + 1;
      const bool periodic = cfg.train.val_every > 0 && res.step % cfg.train.val_every == 0 && res.step != opt.steps;
      if (periodic && !data.val.empty()) res.validation.push_back({res.step, evaluate_model(data.val, res.params, cfg)});
    }
  }
  if (!data.val.empty()) res.validation.push_back({res.step, evaluate_model(data.val, res.params, cfg)});
  res.batch_hash = hasher.hex();

  if (opt.out) {
    const auto& dir = *opt.out;
    std::filesystem::create_directories(dir);
    save_checkpoint(dir, res.params, cfg, res.step, &res.optimizer);
    std::ofstream csv(dir / kLossCsv, std::ios::trunc);
    if (!csv) throw DataError("cannot write " + (dir / kLossCsv).string());
    csv << kLossCsvHeader << '\n';
    for (const auto& row : res.losses) csv << format_loss_row(row) << '\n';
    if (!data.val.empty()) {
      std::ofstream val(dir / kValMetrics, std::ios::trunc);
      if (!val) throw DataError("cannot write " + (dir / kValMetrics).string());
      val << nlohmann::json{{"history", val_history_json(res.validation)}}.dump(2) << '\n';
    }
  }
  return res;
}

}  // namespace rtfusion
