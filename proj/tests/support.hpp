// Shared helpers for the test binaries.
#pragma once

#include <vector>

#include "fscil/ops.hpp"
#include "fscil/random.hpp"
#include "fscil/tensor.hpp"

namespace fscil::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, scale));
  return Tensor<T>::from(shape, std::move(v));
}

/// sum(y ⊙ probe): turns any tensor-valued op into a scalar with a generic gradient.
template <typename T>
Tensor<T> project(Tape<T>& tape, const Tensor<T>& y, const Tensor<T>& probe) {
  return sum(tape, mul(tape, y, probe));
}

}  // namespace fscil::testing
