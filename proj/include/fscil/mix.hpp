/**
 * @file mix.hpp
 * @brief Feature-level CutMix: rectangular binary masks, the mixing block and
 *        the mask-share reweighting function for the two cross-entropy terms.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fscil/ops.hpp"
#include "fscil/random.hpp"
#include "fscil/tensor.hpp"

namespace fscil {

struct MixWeightParams {
  double r = 3.0;
  double alpha = 2.0;

  void validate() const {
    if (!(r > 0.0)) throw std::invalid_argument("mix: r must be positive");
    if (!(alpha > 0.0)) throw std::invalid_argument("mix: alpha must be positive");
  }
};

/// Binary mask at feature resolution; ones mark positions taken from the first branch.
struct MixMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> cells;  // row-major, 0 or 1
  double kappa_eff = 0.0;

  std::uint8_t at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }

  template <typename T>
  Tensor<T> as_tensor() const {
    std::vector<T> v(cells.begin(), cells.end());
    return Tensor<T>::from({height, width}, std::move(v));
  }
};

/// Rectangle of area ≈ kappa·h·w centred at (center_y, center_x), clipped to the map.
inline MixMask rectangle_mask(std::size_t h, std::size_t w, double kappa, std::size_t center_y,
                              std::size_t center_x) {
  if (h == 0 || w == 0) throw std::invalid_argument("rectangle_mask: empty map");
  kappa = std::clamp(kappa, 0.0, 1.0);
  const auto side = std::sqrt(kappa);
  const auto cut_h = static_cast<std::ptrdiff_t>(std::lround(static_cast<double>(h) * side));
  const auto cut_w = static_cast<std::ptrdiff_t>(std::lround(static_cast<double>(w) * side));
  const auto y0 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(center_y) - cut_h / 2, 0,
                                             static_cast<std::ptrdiff_t>(h));
  const auto x0 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(center_x) - cut_w / 2, 0,
                                             static_cast<std::ptrdiff_t>(w));
  const auto y1 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(center_y) - cut_h / 2 + cut_h,
                                             0, static_cast<std::ptrdiff_t>(h));
  const auto x1 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(center_x) - cut_w / 2 + cut_w,
                                             0, static_cast<std::ptrdiff_t>(w));
  MixMask m;
  m.height = h;
  m.width = w;
  m.cells.assign(h * w, 0);
  std::size_t ones = 0;
  for (auto y = y0; y < y1; ++y) {
    for (auto x = x0; x < x1; ++x) {
      m.cells[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1;
      ++ones;
    }
  }
  m.kappa_eff = static_cast<double>(ones) / static_cast<double>(h * w);
  return m;
}

/// κ ~ Beta(α, α); the centre is drawn uniformly among positions where the
/// rectangle fits, so κ = 1 always yields the full map.
inline MixMask make_cutmix_mask(std::size_t h, std::size_t w, const MixWeightParams& params, Rng& rng) {
  params.validate();
  if (h == 0 || w == 0) throw std::invalid_argument("make_cutmix_mask: h and w must be >= 1");
  const double kappa = rng.beta(params.alpha, params.alpha);
  const double side = std::sqrt(kappa);
  const auto cut_h = static_cast<std::size_t>(std::lround(static_cast<double>(h) * side));
  const auto cut_w = static_cast<std::size_t>(std::lround(static_cast<double>(w) * side));
  const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - cut_h)));
  const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - cut_w)));
  return rectangle_mask(h, w, kappa, y0 + cut_h / 2, x0 + cut_w / 2);
}

/// Stacks per-sample masks into an [N, H, W] tensor.
template <typename T>
Tensor<T> stack_masks(const std::vector<MixMask>& masks) {
  if (masks.empty()) throw std::invalid_argument("stack_masks: no masks");
  const std::size_t h = masks[0].height, w = masks[0].width;
  std::vector<T> v;
  v.reserve(masks.size() * h * w);
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) throw ShapeError("stack_masks: masks differ in size");
    v.insert(v.end(), m.cells.begin(), m.cells.end());
  }
  return Tensor<T>::from({masks.size(), h, w}, std::move(v));
}

/// 2 · (mask ⊙ l1 + (1 − mask) ⊙ l2) over [N, C, H, W] features.
template <typename T>
Tensor<T> mix_features(Tape<T>& tape, const Tensor<T>& l1, const Tensor<T>& l2, const Tensor<T>& mask) {
  return masked_blend(tape, l1, l2, mask, T{2});
}

template <typename T>
Tensor<T> mix_features(Tape<T>& tape, const Tensor<T>& l1, const Tensor<T>& l2, const MixMask& mask) {
  return mix_features(tape, l1, l2, mask.as_tensor<T>());
}

/// w_r(κ) = 2 κ^{1/r} / (κ^{1/r} + (1 − κ)^{1/r}), with w_r(0) = 0 and w_r(1) = 2.
inline double weight_fn(double kappa, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("weight_fn: r must be positive");
  if (kappa <= 0.0) return 0.0;
  if (kappa >= 1.0) return 2.0;
  const double a = std::pow(kappa, 1.0 / r);
  const double b = std::pow(1.0 - kappa, 1.0 / r);
  return 2.0 * a / (a + b);
}

}  // namespace fscil
