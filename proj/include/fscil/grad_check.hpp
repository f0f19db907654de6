/**
 * @file grad_check.hpp
 * @brief Central-difference validation of tape gradients.
 */
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fscil/tensor.hpp"

namespace fscil {

template <typename T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&)>;

/// Max over all coordinates of |analytic − numeric| / max(1, |analytic|).
/// `f` must build its graph from `params` and return a scalar.
template <typename T>
T grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> params, T epsilon) {
  if (!(epsilon > T{0})) throw std::invalid_argument("grad_check: epsilon must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    Tape<T> tape;
    Tensor<T> loss = f(tape);
    if (loss.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    if (loss.requires_grad()) backward(loss, tape);
  }
  auto eval = [&]() {
    NoGradGuard guard;
    Tape<T> tape;
    const T v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  T worst{0};
  for (auto& p : params) {
    std::vector<T> analytic(p.numel(), T{0});
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T saved = p[i];
      p[i] = saved + epsilon;
      const T up = eval();
      p[i] = saved - epsilon;
      const T down = eval();
      p[i] = saved;
      const T numeric = (up - down) / (T{2} * epsilon);
      const T err = std::abs(analytic[i] - numeric) / std::max(T{1}, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input form: f receives the tape and the input tensor.
template <typename T>
T grad_check(const std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>& f, Tensor<T> x,
             T epsilon) {
  return grad_check<T>([&](Tape<T>& tape) { return f(tape, x); }, std::vector<Tensor<T>>{x},
                       epsilon);
}

}  // namespace fscil
