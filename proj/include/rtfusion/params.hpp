#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rtfusion/errors.hpp"
#include "rtfusion/rng.hpp"
#include "rtfusion/tensor.hpp"

namespace rtfusion {

/// Named, ordered collection of learnable tensors. Insertion order defines
/// checkpoint layout and optimizer state order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.contains(name)) throw ShapeError("duplicate parameter name: " + name);
    value.requires_grad_(true);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  Tensor<T>& add_zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>(shape, T(0))); }
  Tensor<T>& add_constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>(shape, value));
  }
  Tensor<T>& add_trunc_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    std::vector<T> values(static_cast<std::size_t>(shape.numel()));
    for (auto& v : values) v = static_cast<T>(rng.truncated_normal(stddev));
    return add(name, Tensor<T>(shape, std::move(values)));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor<T>& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
    return tensors_[it->second];
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }
  /// Undefined tensor when absent.
  Tensor<T> find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? Tensor<T>() : tensors_[it->second];
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }

  std::int64_t total_numel() const {
    std::int64_t total = 0;
    for (const auto& t : tensors_) total += t.numel();
    return total;
  }

  /// Parameters whose names start with prefix.
  std::int64_t numel_with_prefix(const std::string& prefix) const {
    std::int64_t total = 0;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].starts_with(prefix)) total += tensors_[i].numel();
    }
    return total;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Deep copy at another precision (e.g. f64 for gradient checks).
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace rtfusion
