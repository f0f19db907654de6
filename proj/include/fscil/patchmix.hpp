/**
 * @file patchmix.hpp
 * @brief Background-level augmentation: grid cells of a target image are
 *        replaced by the same cells of a stored exemplar. Cells are drawn from
 *        a bowl-shaped distribution that is zero at the centre and grows
 *        towards the border, which keeps the object region intact.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fscil/random.hpp"

namespace fscil {

enum class SamplingMode { spatial, uniform, off };

inline std::string to_string(SamplingMode m) {
  switch (m) {
    case SamplingMode::spatial: return "spatial";
    case SamplingMode::uniform: return "uniform";
    case SamplingMode::off: return "off";
  }
  return "?";
}

struct PatchGrid {
  std::size_t n = 0;
  std::vector<double> cell_weights;  // n*n, row-major, sums to 1
  double sigma = 0.5;

  double weight(std::size_t row, std::size_t col) const { return cell_weights[row * n + col]; }
};

struct PatchMixConfig {
  std::size_t n = 8;
  std::size_t k_min = 3;
  std::size_t k_max = 5;
  double apply_prob = 0.5;
  double sigma = 0.5;
  SamplingMode mode = SamplingMode::spatial;

  void validate() const {
    if (n < 2) throw std::invalid_argument("patchmix: grid must be at least 2x2");
    if (k_min < 1 || k_min > k_max || k_max > n * n) {
      throw std::invalid_argument("patchmix: need 1 <= k_min <= k_max <= n^2");
    }
    if (apply_prob < 0.0 || apply_prob > 1.0) {
      throw std::invalid_argument("patchmix: apply_prob must lie in [0, 1]");
    }
    if (!(sigma > 0.0)) throw std::invalid_argument("patchmix: sigma must be positive");
  }
};

/// Cell (i, j) centre maps to (u, v) in [-1, 1]^2; the weight is the negative
/// log of a peak-normalized Gaussian, (u² + v²) / (2σ²), then normalized to sum 1.
inline PatchGrid bowl_weights(std::size_t n, double sigma) {
  if (n < 2) throw std::invalid_argument("bowl_weights: n must be >= 2");
  if (!(sigma > 0.0)) throw std::invalid_argument("bowl_weights: sigma must be positive");
  PatchGrid g;
  g.n = n;
  g.sigma = sigma;
  g.cell_weights.resize(n * n);
  const auto coord = [n](std::size_t i) {
    return static_cast<double>(2 * i + 1) / static_cast<double>(n) - 1.0;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double u = coord(j), v = coord(i);
      const double w = (u * u + v * v) / (2.0 * sigma * sigma);
      g.cell_weights[i * n + j] = w;
      total += w;
    }
  }
  for (auto& w : g.cell_weights) w /= total;
  return g;
}

inline PatchGrid uniform_weights(std::size_t n) {
  if (n < 1) throw std::invalid_argument("uniform_weights: n must be >= 1");
  PatchGrid g;
  g.n = n;
  g.cell_weights.assign(n * n, 1.0 / static_cast<double>(n * n));
  return g;
}

/// Draws k ~ U{k_min..k_max} distinct cells, each pick proportional to the
/// remaining weights. Returns flat cell indices (row * n + col).
inline std::vector<std::size_t> sample_patches(const PatchGrid& grid, std::size_t k_min,
                                               std::size_t k_max, Rng& rng) {
  std::size_t positive = 0;
  for (double w : grid.cell_weights) positive += w > 0.0 ? 1 : 0;
  if (k_min > k_max || k_max > positive) {
    throw std::invalid_argument("sample_patches: cannot draw up to " + std::to_string(k_max) +
                                " cells from " + std::to_string(positive) + " with positive weight");
  }
  const auto k = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(k_min), static_cast<std::int64_t>(k_max)));
  std::vector<double> remaining = grid.cell_weights;
  std::vector<std::size_t> picked;
  picked.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    double total = 0.0;
    for (double w : remaining) total += w;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::size_t chosen = remaining.size();
    std::size_t last_positive = remaining.size();
    for (std::size_t c = 0; c < remaining.size(); ++c) {
      if (remaining[c] <= 0.0) continue;
      last_positive = c;
      acc += remaining[c];
      if (target < acc) {
        chosen = c;
        break;
      }
    }
    if (chosen == remaining.size()) chosen = last_positive;  // rounding at the top end
    picked.push_back(chosen);
    remaining[chosen] = 0.0;
  }
  return picked;
}

/// Row/column pixel range of a grid cell; the last row and column absorb any remainder.
inline std::pair<std::size_t, std::size_t> cell_span(std::size_t index, std::size_t n, std::size_t side) {
  const std::size_t step = side / n;
  const std::size_t begin = index * step;
  const std::size_t end = index + 1 == n ? side : begin + step;
  return {begin, end};
}

/// Copies the pixels of `cells` from background into a copy of target.
/// Images are [C, H, W] flattened.
inline std::vector<float> apply_patchmix(std::span<const float> target, std::span<const float> background,
                                         std::size_t channels, std::size_t height, std::size_t width,
                                         std::span<const std::size_t> cells, std::size_t n) {
  if (target.size() != background.size() || target.size() != channels * height * width) {
    throw std::invalid_argument("apply_patchmix: target and background must both be [" +
                                std::to_string(channels) + "," + std::to_string(height) + "," +
                                std::to_string(width) + "]");
  }
  if (n == 0 || height < n || width < n) {
    throw std::invalid_argument("apply_patchmix: image smaller than the grid");
  }
  std::vector<float> out(target.begin(), target.end());
  for (std::size_t cell : cells) {
    if (cell >= n * n) throw std::out_of_range("apply_patchmix: cell index out of range");
    const auto [y0, y1] = cell_span(cell / n, n, height);
    const auto [x0, x1] = cell_span(cell % n, n, width);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const std::size_t idx = (c * height + y) * width + x;
          out[idx] = background[idx];
        }
      }
    }
  }
  return out;
}

struct LabeledImage {
  std::vector<float> pixels;  // [C, H, W]
  int label = 0;
};

struct PatchMixStats {
  std::size_t calls = 0;
  std::size_t fired = 0;
  std::size_t skipped_empty_bank = 0;
};

/// With probability apply_prob, pastes bowl-sampled cells of a random bank
/// image onto the target. The label is always the target's.
inline LabeledImage maybe_augment(const LabeledImage& target, std::span<const std::vector<float>> bank,
                                  const PatchMixConfig& cfg, std::size_t channels, std::size_t height,
                                  std::size_t width, Rng& rng, PatchMixStats* stats = nullptr) {
  if (stats) ++stats->calls;
  if (cfg.mode == SamplingMode::off || !rng.bernoulli(cfg.apply_prob)) return target;
  if (bank.empty()) {
    if (stats) ++stats->skipped_empty_bank;
    return target;
  }
  const auto& background = bank[rng.index(bank.size())];
  const PatchGrid grid = cfg.mode == SamplingMode::spatial ? bowl_weights(cfg.n, cfg.sigma) : uniform_weights(cfg.n);
  const auto cells = sample_patches(grid, cfg.k_min, cfg.k_max, rng);
  if (stats) ++stats->fired;
  return {apply_patchmix(target.pixels, background, channels, height, width, cells, cfg.n), target.label};
}

}  // namespace fscil
