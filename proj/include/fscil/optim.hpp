/**
 * @file optim.hpp
 * @brief SGD with (Nesterov) momentum and L2 weight decay, plus the
 *        warm-up / multi-step learning-rate schedule.
 */
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fscil/tensor.hpp"

namespace fscil {

template <typename T>
struct SgdState {
  T learning_rate = T(0.01);
  T momentum = T(0.9);
  T weight_decay = T(5e-4);
  bool nesterov = true;
  std::vector<std::vector<T>> velocity;
};

/// One update over `params`. Weight decay is folded into the gradient before
/// momentum: g ← ∇ + wd·θ; v ← μv + g; θ ← θ − lr·(nesterov ? g + μv : v).
/// Gradients are zeroed afterwards.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, SgdState<T>& state) {
  if (state.learning_rate < T{0} || state.momentum < T{0} || state.momentum >= T{1} ||
      state.weight_decay < T{0}) {
    throw std::invalid_argument("sgd_step: hyper-parameters out of range");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const auto& p : params) state.velocity.emplace_back(p.numel(), T{0});
  }
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: parameter list changed since the first step");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) {
      throw std::invalid_argument("sgd_step: parameter " + std::to_string(k) + " has no gradient");
    }
    if (state.velocity[k].size() != params[k].numel()) {
      throw ShapeError("sgd_step: velocity buffer does not match parameter " + std::to_string(k));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& v = state.velocity[k];
    auto g = p.grad();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T grad = g[i] + state.weight_decay * p[i];
      v[i] = state.momentum * v[i] + grad;
      const T step = state.nesterov ? grad + state.momentum * v[i] : v[i];
      p[i] -= state.learning_rate * step;
    }
    p.zero_grad();
  }
}

/// Linear warm-up followed by step decay at fractional milestones.
struct LrSchedule {
  double base_lr = 0.01;
  double warmup_frac = 0.05;
  std::vector<double> milestones{0.6, 0.8};
  double decay = 0.1;

  double at(std::size_t epoch, std::size_t total_epochs) const {
    if (total_epochs == 0) return base_lr;
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_epochs)));
    if (epoch < warmup) {
      return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
    }
    double lr = base_lr;
    for (double m : milestones) {
      if (epoch >= static_cast<std::size_t>(std::lround(m * static_cast<double>(total_epochs)))) lr *= decay;
    }
    return lr;
  }
};

}  // namespace fscil
