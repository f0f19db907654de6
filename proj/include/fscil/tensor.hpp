/**
 * @file tensor.hpp
 * @brief Dense tensors and the computation tape used for reverse-mode gradients.
 *
 * A Tensor is a shared handle: copies alias the same storage, which is what
 * lets the tape refer back to inputs and outputs during the backward sweep.
 * Use clone() for an independent copy.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fscil {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty means absent
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Storage>();
    t.impl_->values.assign(fscil::numel(shape), T{0});
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (fscil::numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(fscil::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.impl_ = std::make_shared<Storage>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<T> values() { return impl_->values; }
  std::span<const T> values() const { return impl_->values; }
  std::vector<T>& storage() { return impl_->values; }
  const std::vector<T>& storage() const { return impl_->values; }
  T& operator[](std::size_t i) { return impl_->values[i]; }
  const T& operator[](std::size_t i) const { return impl_->values[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + to_string(shape()) + " is not a scalar");
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  // Gradient state lives in the shared storage, so these mutate through const handles.
  void set_requires_grad(bool flag) const { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  /// Allocates a zero gradient buffer when absent and returns it.
  std::span<T> ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T{0});
    return impl_->grad;
  }
  void zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }
  void clear_grad() const { impl_->grad.clear(); }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  Tensor clone() const {
    Tensor t = from(shape(), impl_->values, impl_->requires_grad);
    t.impl_->grad = impl_->grad;
    return t;
  }

  /// Copy of the values with no gradient tracking.
  Tensor detach() const { return from(shape(), impl_->values, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->values.begin(), impl_->values.end());
    return Tensor<U>::from(shape(), std::move(out), false);
  }

 private:
  std::shared_ptr<Storage> impl_;
};

/// Ordered record of executed differentiable operations.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward) {
    entries_.push_back({op, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }
  const std::vector<Entry>& entries() const { return entries_; }

  bool produced(const Tensor<T>& t) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry& e) { return e.output.same_as(t); });
  }

 private:
  std::vector<Entry> entries_;
};

/// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
/// gradients into every requires_grad tensor reachable from the loss.
template <typename T>
void backward(Tensor<T> loss, const Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  const auto& entries = tape.entries();
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(entries.size()) - 1; i >= 0; --i) {
    if (entries[static_cast<std::size_t>(i)].output.same_as(loss)) {
      start = i;
      break;
    }
  }
  if (start < 0) {
    if (loss.requires_grad()) {
      // A leaf used directly as the loss.
      loss.ensure_grad()[0] += T{1};
      return;
    }
    throw std::invalid_argument("backward: loss tensor is not recorded on this tape");
  }
  loss.ensure_grad()[0] += T{1};
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    const auto& e = entries[static_cast<std::size_t>(i)];
    if (e.output.has_grad()) e.backward();
  }
}

}  // namespace fscil
