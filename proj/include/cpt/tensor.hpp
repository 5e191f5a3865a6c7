#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cpt/errors.hpp"

namespace cpt {

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  // Values are immutable once an op has produced them, so views (reshape) may share storage.
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;
  bool requires_grad = false;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major array that can take part in reverse-mode differentiation.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor axis lengths must be positive, got " + shape_str(shape));
    impl_->data = std::make_shared<std::vector<T>>(numel_of(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor axis lengths must be positive, got " + shape_str(shape));
    if (numel_of(shape) != values.size())
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    impl_->data = std::make_shared<std::vector<T>>(std::move(values));
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, std::vector<T>{v}, requires_grad); }

  static Tensor from_impl(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data->size(); }

  /// Axis length; negative indices count from the back.
  std::size_t dim(int axis) const { return impl_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    return static_cast<std::size_t>(a);
  }

  std::span<const T> data() const { return {impl_->data->data(), impl_->data->size()}; }

  /// Write access for leaves (parameter updates, data loading). Never call on tape outputs.
  std::span<T> mutable_data() { return {impl_->data->data(), impl_->data->size()}; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return (*impl_->data)[0];
  }

  T at(std::initializer_list<std::size_t> idx) const { return (*impl_->data)[offset(idx)]; }
  T& at(std::initializer_list<std::size_t> idx) { return (*impl_->data)[offset(idx)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  std::span<T> grad_mut() { return {impl_->grad_buffer(), impl_->data->size()}; }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of values with no gradient history.
  Tensor detach() const { return Tensor(shape(), std::vector<T>(data().begin(), data().end())); }

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : idx) {
      if (v >= impl_->shape[i]) throw DimensionError("index out of range for shape " + shape_str(shape()));
      off = off * impl_->shape[i] + v;
      ++i;
    }
    return off;
  }

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations. Backward replays the record in reverse.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, std::function<void()> backward) {
    entries_.push_back({std::string(op), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf with requires_grad.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward on non-scalar tensor of shape " + shape_str(loss.shape()) +
                       " requires an explicit seed");
    std::vector<T> seed{T(1)};
    backward(loss, seed);
  }

  void backward(Tensor<T>& out, std::span<const T> seed) {
    if (seed.size() != out.numel()) throw DimensionError("backward seed size does not match output");
    if (!out.requires_grad()) throw UsageError("backward on a tensor that was not produced on the tape");
    auto g = out.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    // Intermediate results only need their gradients during one sweep.
    entries_.clear();
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {
template <typename T>
inline thread_local Tape<T>* current_tape = nullptr;

inline thread_local bool debug_checks = false;
}  // namespace detail

/// Makes `tape` the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::current_tape<T>) { detail::current_tape<T> = &tape; }
  ~TapeScope() { detail::current_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
Tape<T>* active_tape() {
  return detail::current_tape<T>;
}

/// Enables a finiteness check on the output of every op for the current thread.
inline void set_debug_checks(bool on) { detail::debug_checks = on; }
inline bool debug_checks_enabled() { return detail::debug_checks; }

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view where) {
  for (T v : t.data())
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(where));
}

}  // namespace cpt
