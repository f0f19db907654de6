/**
 * @file ssl.hpp
 * @brief Variance/invariance/covariance self-supervision that is compatible
 *        with feature mixing: the spatial transform applied to a view's two
 *        input images is applied to its mixing mask as well.
 */
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fscil/ensemble_net.hpp"
#include "fscil/mix.hpp"
#include "fscil/ops.hpp"
#include "fscil/random.hpp"

namespace fscil {

enum class ViewTransform { identity, rot90, rot180, rot270, hflip, vflip };

inline constexpr std::array<ViewTransform, 6> kAllTransforms{
    ViewTransform::identity, ViewTransform::rot90, ViewTransform::rot180,
    ViewTransform::rot270,   ViewTransform::hflip, ViewTransform::vflip};

inline ViewTransform inverse(ViewTransform t) {
  switch (t) {
    case ViewTransform::rot90: return ViewTransform::rot270;
    case ViewTransform::rot270: return ViewTransform::rot90;
    default: return t;
  }
}

inline std::string to_string(ViewTransform t) {
  switch (t) {
    case ViewTransform::identity: return "identity";
    case ViewTransform::rot90: return "rot90";
    case ViewTransform::rot180: return "rot180";
    case ViewTransform::rot270: return "rot270";
    case ViewTransform::hflip: return "hflip";
    case ViewTransform::vflip: return "vflip";
  }
  return "?";
}

inline ViewTransform sample_transform(Rng& rng) { return kAllTransforms[rng.index(kAllTransforms.size())]; }

/// Applies `t` independently to each of `planes` row-major [h, w] planes.
/// Rotations are counter-clockwise and require square planes.
template <typename V>
std::vector<V> transform_planes(std::span<const V> in, std::size_t planes, std::size_t h, std::size_t w,
                                ViewTransform t) {
  if (in.size() != planes * h * w) throw ShapeError("apply_transform: buffer size mismatch");
  const bool rotation = t == ViewTransform::rot90 || t == ViewTransform::rot270;
  if ((rotation || t == ViewTransform::rot180) && h != w) {
    throw ShapeError("apply_transform: " + to_string(t) + " needs a square map, got " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<V> out(in.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const V* src = in.data() + p * h * w;
    V* dst = out.data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        std::size_t si = i, sj = j;
        switch (t) {
          case ViewTransform::identity: break;
          case ViewTransform::rot90: si = j; sj = w - 1 - i; break;
          case ViewTransform::rot180: si = h - 1 - i; sj = w - 1 - j; break;
          case ViewTransform::rot270: si = h - 1 - j; sj = i; break;
          case ViewTransform::hflip: sj = w - 1 - j; break;
          case ViewTransform::vflip: si = h - 1 - i; break;
        }
        dst[i * w + j] = src[si * w + sj];
      }
    }
  }
  return out;
}

/// Transforms the spatial dims of an [..., H, W] tensor. No gradient is tracked.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& x, ViewTransform t) {
  if (x.rank() < 2) throw ShapeError("apply_transform: needs at least two spatial dims");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  return Tensor<T>::from(x.shape(), transform_planes<T>(x.values(), x.numel() / (h * w), h, w, t));
}

inline MixMask apply_transform(const MixMask& m, ViewTransform t) {
  MixMask out = m;
  out.cells = transform_planes<std::uint8_t>(m.cells, 1, m.height, m.width, t);
  return out;
}

/// Per-sample transform of an [N, ...] batch; `ts` has one entry (whole batch) or N.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& x, std::span<const ViewTransform> ts) {
  if (ts.size() == 1) return apply_transform(x, ts[0]);
  const std::size_t n = x.dim(0);
  if (ts.size() != n) throw ShapeError("apply_transform: need 1 or N transforms");
  const std::size_t per = x.numel() / n, h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  std::vector<T> out;
  out.reserve(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    auto part = transform_planes<T>(x.values().subspan(i * per, per), per / (h * w), h, w, ts[i]);
    out.insert(out.end(), part.begin(), part.end());
  }
  return Tensor<T>::from(x.shape(), std::move(out));
}

struct SslParams {
  double lambda_w = 25.0;
  double mu_w = 25.0;
  double nu_w = 1.0;
  double gamma = 0.2;
  double eps = 1e-4;
  double std_target = 1.0;

  void validate() const {
    if (lambda_w < 0 || mu_w < 0 || nu_w < 0 || gamma < 0 || std_target < 0) {
      throw std::invalid_argument("ssl: weights must be nonnegative");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("ssl: eps must be positive");
  }
};

template <typename T>
struct ViewPair {
  TrainOutputs<T> view1;
  TrainOutputs<T> view2;
};

/// Runs both transformed mixtures through the net: view k sees
/// (t_k(x1), t_k(x2), t_k(mask)). `t1`/`t2` hold one transform or one per sample.
template <typename T>
ViewPair<T> build_views(Tape<T>& tape, const EnsembleNet<T>& net, const Tensor<T>& x1, const Tensor<T>& x2,
                        const std::vector<MixMask>& masks, std::span<const ViewTransform> t1,
                        std::span<const ViewTransform> t2, bool batch_stats = true) {
  auto one_view = [&](std::span<const ViewTransform> ts) {
    std::vector<MixMask> tm;
    tm.reserve(masks.size());
    for (std::size_t i = 0; i < masks.size(); ++i) {
      tm.push_back(apply_transform(masks[i], ts.size() == 1 ? ts[0] : ts[i]));
    }
    const Tensor<T> m = tm.empty() ? Tensor<T>{} : stack_masks<T>(tm);
    const Tensor<T> b = net.num_branches() > 1 ? apply_transform(x2, ts) : Tensor<T>{};
    return forward_train(tape, net, apply_transform(x1, ts), b, m, batch_stats);
  };
  ViewPair<T> out;
  out.view1 = one_view(t1);
  out.view2 = one_view(t2);
  return out;
}

/// Mean over the batch of ‖z − z′‖² / dim.
template <typename T>
Tensor<T> invariance_term(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& z2) {
  detail::require_rank("invariance_term", z, 2, "Z");
  detail::require_same_shape("invariance_term", z, z2);
  if (z.dim(0) < 1) throw ShapeError("invariance_term: empty batch");
  const Tensor<T> d = sub(tape, z, z2);
  return mean(tape, mul(tape, d, d));
}

/// Mean over dims of max(0, std_target − sqrt(Var(dim) + eps)), population variance.
template <typename T>
Tensor<T> variance_term(Tape<T>& tape, const Tensor<T>& z, T std_target, T eps) {
  detail::require_rank("variance_term", z, 2, "Z");
  if (z.dim(0) < 2) throw ShapeError("variance_term: batch must be >= 2");
  const Tensor<T> s = sqrt(tape, add_scalar(tape, variance_per_dim(tape, z), eps));
  return mean(tape, relu(tape, add_scalar(tape, scale(tape, s, T{-1}), std_target)));
}

/// (1/dim) Σ_{i≠j} Cov(Z)_{ij}², with 1/(N−1) normalization.
template <typename T>
Tensor<T> covariance_term(Tape<T>& tape, const Tensor<T>& z) {
  detail::require_rank("covariance_term", z, 2, "Z");
  if (z.dim(0) < 2) throw ShapeError("covariance_term: batch must be >= 2");
  const std::size_t d = z.dim(1);
  Tensor<T> off = Tensor<T>::full({d, d}, T{1});
  for (std::size_t i = 0; i < d; ++i) off[i * d + i] = T{0};
  const Tensor<T> c = mul(tape, covariance_matrix(tape, z), off);
  return scale(tape, sum(tape, mul(tape, c, c)), T{1} / static_cast<T>(d));
}

template <typename T>
Tensor<T> ssl_loss(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& z2, const SslParams& p) {
  p.validate();
  detail::require_same_shape("ssl_loss", z, z2);
  const T eps = static_cast<T>(p.eps), target = static_cast<T>(p.std_target);
  Tensor<T> inv = scale(tape, invariance_term(tape, z, z2), static_cast<T>(p.lambda_w));
  Tensor<T> var = scale(tape, add(tape, variance_term(tape, z, target, eps), variance_term(tape, z2, target, eps)),
                        static_cast<T>(p.mu_w));
  Tensor<T> cov = scale(tape, add(tape, covariance_term(tape, z), covariance_term(tape, z2)),
                        static_cast<T>(p.nu_w));
  return add(tape, add(tape, inv, var), cov);
}

}  // namespace fscil
