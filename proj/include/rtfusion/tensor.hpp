#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rtfusion/errors.hpp"

namespace rtfusion {

/// Allocator returning 64-byte aligned storage. Every buffer then starts on
/// the same alignment, so vectorized kernels take identical code paths from
/// run to run regardless of where the heap places a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// (batch, channels, height, width); row-major with width fastest.
struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t plane() const { return h * w; }
  constexpr std::int64_t operator[](int dim) const {
    return dim == 0 ? n : dim == 1 ? c : dim == 2 ? h : w;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

inline const char* dim_name(int dim) {
  static constexpr const char* names[] = {"batch", "channel", "height", "width"};
  return names[dim];
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    node_->shape = shape;
    node_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    }
    node_->shape = shape;
    node_->data.assign(values.begin(), values.end());
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->shape.numel(); }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for leaves (parameters, inputs, optimizer updates).
  std::span<T> data_mut() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& requires_grad_(bool flag = true) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
    return *this;
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
  }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape& s = node_->shape;
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return node_->data[static_cast<std::size_t>(index(n, c, h, w))];
  }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->data[0];
  }

  /// Copy of the values with no graph history.
  Tensor detach() const {
    Tensor out;
    out.node_ = std::make_shared<Node<T>>();
    out.node_->shape = shape();
    out.node_->data = node_->data;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(values));
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  static void check_shape(const Shape& s) {
    for (int d = 0; d < 4; ++d) {
      if (s[d] < 1) {
        throw ShapeError(std::string("tensor ") + dim_name(d) + " extent must be >= 1, got " +
                         std::to_string(s[d]));
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

/// The recorded primitive applications reachable from a root, in topological
/// order (inputs before outputs). Built on demand from the graph links each
/// primitive stores; replaying backward walks it in reverse.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    tape.root_ = root.node();
    if (!root.node()->requires_grad) return tape;
    std::unordered_set<const Node<T>*> visited;
    // Iterative post-order DFS; deep networks would overflow a recursive walk.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void backward() {
    if (order_.empty()) return;
    Node<T>* root = order_.back();
    root->grad.assign(root->data.size(), T(1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (node->is_leaf()) continue;
      node->ensure_grad();
      node->backward_fn(*node);
      // Interior gradients are consumed exactly once.
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }

 private:
  std::shared_ptr<Node<T>> root_;
  std::vector<Node<T>*> order_;
};

/// Populates grads of every requires_grad leaf reachable from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + loss.shape().str());
  }
  Tape<T>::record(loss).backward();
}

}  // namespace rtfusion
