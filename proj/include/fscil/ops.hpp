/**
 * @file ops.hpp
 * @brief Differentiable forward operations. Each op records its backward rule
 *        on the tape when gradient mode is on and any input requires grad.
 *
 * Layout conventions: images are NCHW, feature batches are [N, D], linear
 * weights are [out, in], convolution weights are [out, in, kh, kw].
 */
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fscil/tensor.hpp"

namespace fscil {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void check_finite(std::string_view op, const Tensor<T>& out) {
  const auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": non-finite output at flat index " +
                         std::to_string(i));
    }
  }
}

[[noreturn]] inline void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& t, std::size_t rank, const char* name) {
  if (!t.defined()) shape_fail(op, std::string(name) + " is undefined");
  if (t.rank() != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                       to_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "operand shapes differ: " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T> t, std::span<const T> delta) {
  auto g = t.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_area() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// 2-D cross-correlation. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dAttrs attrs = {}) {
  constexpr std::string_view op = "conv2d";
  detail::require_rank(op, x, 4, "input");
  detail::require_rank(op, weight, 4, "weight");
  if (attrs.stride == 0) detail::shape_fail(op, "stride must be positive");
  const std::size_t n = x.dim(0), out_c = weight.dim(0);
  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3),
                         attrs.stride, attrs.padding, 0, 0};
  if (weight.dim(1) != g.channels) {
    detail::shape_fail(op, "input has " + std::to_string(g.channels) + " channels but weight expects " +
                               std::to_string(weight.dim(1)));
  }
  if (g.height + 2 * g.padding < g.kh || g.width + 2 * g.padding < g.kw) {
    detail::shape_fail(op, "kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                               " larger than padded input " + to_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c)) {
    detail::shape_fail(op, "bias must be [" + std::to_string(out_c) + "], got " +
                               to_string(bias.shape()));
  }
  g.out_h = (g.height + 2 * g.padding - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kw) / g.stride + 1;

  const bool track = detail::tracks<T>({&x, &weight, &bias});
  Tensor<T> out = Tensor<T>::zeros({n, out_c, g.out_h, g.out_w}, track);
  const std::size_t patch = g.patch(), area = g.out_area();
  const std::size_t in_stride = g.channels * g.height * g.width;
  std::vector<T> cols(patch * area);
  detail::ConstMatMap<T> w(weight.values().data(), static_cast<Eigen::Index>(out_c),
                           static_cast<Eigen::Index>(patch));
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.values().data() + i * in_stride, g, cols.data());
    detail::MatMap<T> y(out.values().data() + i * out_c * area, static_cast<Eigen::Index>(out_c),
                        static_cast<Eigen::Index>(area));
    y.noalias() = w * detail::ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(patch),
                                             static_cast<Eigen::Index>(area));
    if (bias.defined()) {
      for (std::size_t o = 0; o < out_c; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x, weight, bias}, out, [x, weight, bias, out, g, n, out_c]() mutable {
      const std::size_t patch = g.patch(), area = g.out_area();
      const std::size_t in_stride = g.channels * g.height * g.width;
      std::vector<T> cols(patch * area), dcols(patch * area);
      const auto dy_all = out.grad();
      detail::ConstMatMap<T> w(weight.values().data(), static_cast<Eigen::Index>(out_c),
                               static_cast<Eigen::Index>(patch));
      for (std::size_t i = 0; i < n; ++i) {
        detail::ConstMatMap<T> dy(dy_all.data() + i * out_c * area,
                                  static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(area));
        if (weight.requires_grad()) {
          detail::im2col(x.values().data() + i * in_stride, g, cols.data());
          detail::MatMap<T> dw(weight.ensure_grad().data(), static_cast<Eigen::Index>(out_c),
                               static_cast<Eigen::Index>(patch));
          dw.noalias() += dy * detail::ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(patch),
                                                      static_cast<Eigen::Index>(area))
                                   .transpose();
        }
        if (bias.defined() && bias.requires_grad()) {
          auto db = bias.ensure_grad();
          for (std::size_t o = 0; o < out_c; ++o) db[o] += dy.row(static_cast<Eigen::Index>(o)).sum();
        }
        if (x.requires_grad()) {
          detail::MatMap<T> dc(dcols.data(), static_cast<Eigen::Index>(patch),
                               static_cast<Eigen::Index>(area));
          dc.noalias() = w.transpose() * dy;
          detail::col2im_add(dcols.data(), g, x.ensure_grad().data() + i * in_stride);
        }
      }
    });
  }
  return out;
}

/// y = x · Wᵀ + b with x [N, in], W [out, in]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  constexpr std::string_view op = "linear";
  detail::require_rank(op, x, 2, "input");
  detail::require_rank(op, weight, 2, "weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    detail::shape_fail(op, "input features " + std::to_string(in) + " != weight columns " +
                               std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    detail::shape_fail(op, "bias must be [" + std::to_string(out_f) + "], got " +
                               to_string(bias.shape()));
  }
  const bool track = detail::tracks<T>({&x, &weight, &bias});
  Tensor<T> out = Tensor<T>::zeros({n, out_f}, track);
  const auto N = static_cast<Eigen::Index>(n), I = static_cast<Eigen::Index>(in),
             O = static_cast<Eigen::Index>(out_f);
  detail::MatMap<T> y(out.values().data(), N, O);
  y.noalias() = detail::ConstMatMap<T>(x.values().data(), N, I) *
                detail::ConstMatMap<T>(weight.values().data(), O, I).transpose();
  if (bias.defined()) {
    for (Eigen::Index r = 0; r < N; ++r) {
      for (Eigen::Index c = 0; c < O; ++c) y(r, c) += bias[static_cast<std::size_t>(c)];
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x, weight, bias}, out, [x, weight, bias, out, N, I, O]() mutable {
      detail::ConstMatMap<T> dy(out.grad().data(), N, O);
      if (x.requires_grad()) {
        detail::MatMap<T>(x.ensure_grad().data(), N, I).noalias() +=
            dy * detail::ConstMatMap<T>(weight.values().data(), O, I);
      }
      if (weight.requires_grad()) {
        detail::MatMap<T>(weight.ensure_grad().data(), O, I).noalias() +=
            dy.transpose() * detail::ConstMatMap<T>(x.values().data(), N, I);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.ensure_grad();
        for (Eigen::Index c = 0; c < O; ++c) db[static_cast<std::size_t>(c)] += dy.col(c).sum();
      }
    });
  }
  return out;
}

/// [M, K] · [K, N] → [M, N].
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "matmul";
  detail::require_rank(op, a, 2, "lhs");
  detail::require_rank(op, b, 2, "rhs");
  if (a.dim(1) != b.dim(0)) {
    detail::shape_fail(op, "inner dimensions differ: " + to_string(a.shape()) + " · " +
                               to_string(b.shape()));
  }
  const auto M = static_cast<Eigen::Index>(a.dim(0)), K = static_cast<Eigen::Index>(a.dim(1)),
             N = static_cast<Eigen::Index>(b.dim(1));
  const bool track = detail::tracks<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros({a.dim(0), b.dim(1)}, track);
  detail::MatMap<T>(out.values().data(), M, N).noalias() =
      detail::ConstMatMap<T>(a.values().data(), M, K) * detail::ConstMatMap<T>(b.values().data(), K, N);
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {a, b}, out, [a, b, out, M, K, N]() mutable {
      detail::ConstMatMap<T> dy(out.grad().data(), M, N);
      if (a.requires_grad()) {
        detail::MatMap<T>(a.ensure_grad().data(), M, K).noalias() +=
            dy * detail::ConstMatMap<T>(b.values().data(), K, N).transpose();
      }
      if (b.requires_grad()) {
        detail::MatMap<T>(b.ensure_grad().data(), K, N).noalias() +=
            detail::ConstMatMap<T>(a.values().data(), M, K).transpose() * dy;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  const auto xv = x.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > T{0} ? xv[i] : T{0};
  detail::check_finite("relu", out);
  if (track) {
    tape.record("relu", {x}, out, [x, out]() mutable {
      auto gx = x.ensure_grad();
      const auto gy = out.grad();
      const auto xv = x.values();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xv[i] > T{0}) gx[i] += gy[i];
      }
    });
  }
  return out;
}

/// Non-overlapping max pooling with window = stride = `kernel`.
template <typename T>
Tensor<T> max_pool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel) {
  constexpr std::string_view op = "max_pool2d";
  detail::require_rank(op, x, 4, "input");
  if (kernel == 0 || x.dim(2) < kernel || x.dim(3) < kernel) {
    detail::shape_fail(op, "window " + std::to_string(kernel) + " does not fit input " +
                               to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / kernel, ow = w / kernel;
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros({n, c, oh, ow}, track);
  std::vector<std::size_t> argmax(out.numel());
  const auto xv = x.values();
  auto yv = out.values();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (oy * kernel) * w + ox * kernel;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (oy * kernel + ky) * w + ox * kernel + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        yv[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x}, out, [x, out, argmax = std::move(argmax)]() mutable {
      auto gx = x.ensure_grad();
      const auto gy = out.grad();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
    });
  }
  return out;
}

/// [N, C, H, W] → [N, C] by spatial mean.
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  constexpr std::string_view op = "global_avg_pool";
  detail::require_rank(op, x, 4, "input");
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros({x.dim(0), x.dim(1)}, track);
  const auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    T s{0};
    for (std::size_t i = 0; i < area; ++i) s += xv[p * area + i];
    out[p] = s / static_cast<T>(area);
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x}, out, [x, out, planes, area]() mutable {
      auto gx = x.ensure_grad();
      const auto gy = out.grad();
      const T inv = T{1} / static_cast<T>(area);
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += gy[p] * inv;
      }
    });
  }
  return out;
}

/// Group normalization over [N, C, H, W] with a per-channel affine transform.
template <typename T>
Tensor<T> group_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::size_t groups, T eps = T(1e-5)) {
  constexpr std::string_view op = "group_norm";
  detail::require_rank(op, x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    detail::shape_fail(op, std::to_string(c) + " channels not divisible into " +
                               std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    detail::shape_fail(op, "affine parameters must be [" + std::to_string(c) + "]");
  }
  const std::size_t per_group = c / groups, count = per_group * area;
  const bool track = detail::tracks<T>({&x, &gamma, &beta});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  std::vector<T> xhat(x.numel()), inv_std(n * groups);
  const auto xv = x.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (i * c + g * per_group) * area;
      T mean{0};
      for (std::size_t k = 0; k < count; ++k) mean += xv[base + k];
      mean /= static_cast<T>(count);
      T var{0};
      for (std::size_t k = 0; k < count; ++k) var += (xv[base + k] - mean) * (xv[base + k] - mean);
      var /= static_cast<T>(count);
      const T inv = T{1} / std::sqrt(var + eps);
      inv_std[i * groups + g] = inv;
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t ch = g * per_group + k / area;
        xhat[base + k] = (xv[base + k] - mean) * inv;
        yv[base + k] = gamma[ch] * xhat[base + k] + beta[ch];
      }
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x, gamma, beta}, out,
                [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
                 area, groups, per_group, count]() mutable {
                  const auto gy = out.grad();
                  if (gamma.requires_grad() || beta.requires_grad()) {
                    std::vector<T> dg(c, T{0}), db(c, T{0});
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (i * c + ch) * area;
                        for (std::size_t k = 0; k < area; ++k) {
                          dg[ch] += gy[base + k] * xhat[base + k];
                          db[ch] += gy[base + k];
                        }
                      }
                    }
                    if (gamma.requires_grad()) detail::accumulate<T>(gamma, dg);
                    if (beta.requires_grad()) detail::accumulate<T>(beta, db);
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.ensure_grad();
                  std::vector<T> dxhat(count);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t g = 0; g < groups; ++g) {
                      const std::size_t base = (i * c + g * per_group) * area;
                      T sum_d{0}, sum_dx{0};
                      for (std::size_t k = 0; k < count; ++k) {
                        const std::size_t ch = g * per_group + k / area;
                        dxhat[k] = gy[base + k] * gamma[ch];
                        sum_d += dxhat[k];
                        sum_dx += dxhat[k] * xhat[base + k];
                      }
                      const T inv = inv_std[i * groups + g];
                      const T m = static_cast<T>(count);
                      for (std::size_t k = 0; k < count; ++k) {
                        gx[base + k] += inv / m * (m * dxhat[k] - sum_d - xhat[base + k] * sum_dx);
                      }
                    }
                  }
                });
  }
  return out;
}

/// Batch normalization over [N, C, H, W] with a per-channel affine transform.
///
/// training = true: normalizes with the batch statistics and, when the running
/// buffers are defined, blends them in place (running ← (1−m)·running + m·batch,
/// unbiased variance). training = false: normalizes with the running buffers,
/// which are then treated as constants.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T> running_mean, Tensor<T> running_var, bool training, T momentum = T(0.1),
                     T eps = T(1e-5)) {
  constexpr std::string_view op = "batch_norm";
  detail::require_rank(op, x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3), count = n * area;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    detail::shape_fail(op, "affine parameters must be [" + std::to_string(c) + "]");
  }
  const bool has_running = running_mean.defined() && running_var.defined();
  if (has_running && (running_mean.shape() != Shape{c} || running_var.shape() != Shape{c})) {
    detail::shape_fail(op, "running statistics must be [" + std::to_string(c) + "]");
  }
  if (!training && !has_running) detail::shape_fail(op, "inference mode needs running statistics");
  if (training && count < 2) detail::shape_fail(op, "training mode needs more than one value per channel");

  const auto xv = x.values();
  std::vector<T> mean(c, T{0}), inv_std(c);
  if (training) {
    std::vector<T> var(c, T{0});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv.data() + (i * c + ch) * area;
        for (std::size_t k = 0; k < area; ++k) mean[ch] += p[k];
      }
    }
    for (auto& m : mean) m /= static_cast<T>(count);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv.data() + (i * c + ch) * area;
        for (std::size_t k = 0; k < area; ++k) var[ch] += (p[k] - mean[ch]) * (p[k] - mean[ch]);
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T biased = var[ch] / static_cast<T>(count);
      inv_std[ch] = T{1} / std::sqrt(biased + eps);
      if (has_running) {
        const T unbiased = var[ch] / static_cast<T>(count - 1);
        running_mean[ch] = (T{1} - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (T{1} - momentum) * running_var[ch] + momentum * unbiased;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = T{1} / std::sqrt(running_var[ch] + eps);
    }
  }

  const bool track = detail::tracks<T>({&x, &gamma, &beta});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  std::vector<T> xhat(x.numel());
  auto yv = out.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * area;
      for (std::size_t k = 0; k < area; ++k) {
        xhat[base + k] = (xv[base + k] - mean[ch]) * inv_std[ch];
        yv[base + k] = gamma[ch] * xhat[base + k] + beta[ch];
      }
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x, gamma, beta}, out,
                [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, area, count,
                 training]() mutable {
                  const auto gy = out.grad();
                  std::vector<T> dg(c, T{0}), db(c, T{0});
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (i * c + ch) * area;
                      for (std::size_t k = 0; k < area; ++k) {
                        dg[ch] += gy[base + k] * xhat[base + k];
                        db[ch] += gy[base + k];
                      }
                    }
                  }
                  if (gamma.requires_grad()) detail::accumulate<T>(gamma, dg);
                  if (beta.requires_grad()) detail::accumulate<T>(beta, db);
                  if (!x.requires_grad()) return;
                  auto gx = x.ensure_grad();
                  const T m = static_cast<T>(count);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (i * c + ch) * area;
                      const T scale = gamma[ch] * inv_std[ch];
                      for (std::size_t k = 0; k < area; ++k) {
                        // Σ dxhat = γ·db and Σ dxhat·xhat = γ·dg per channel.
                        gx[base + k] += training
                                            ? scale / m * (m * gy[base + k] - db[ch] - xhat[base + k] * dg[ch])
                                            : scale * gy[base + k];
                      }
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  const bool track = detail::tracks<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  detail::check_finite("add", out);
  if (track) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      if (a.requires_grad()) detail::accumulate<T>(a, out.grad());
      if (b.requires_grad()) detail::accumulate<T>(b, out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  const bool track = detail::tracks<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  detail::check_finite("sub", out);
  if (track) {
    tape.record("sub", {a, b}, out, [a, b, out]() mutable {
      if (a.requires_grad()) detail::accumulate<T>(a, out.grad());
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        const auto gy = out.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  const bool track = detail::tracks<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  detail::check_finite("mul", out);
  if (track) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      const auto gy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  const bool track = detail::tracks<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  detail::check_finite("scale", out);
  if (track) {
    tape.record("scale", {a}, out, [a, out, factor]() mutable {
      auto ga = a.ensure_grad();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T offset) {
  const bool track = detail::tracks<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + offset;
  detail::check_finite("add_scalar", out);
  if (track) {
    tape.record("add_scalar", {a}, out,
                [a, out]() mutable { detail::accumulate<T>(a, out.grad()); });
  }
  return out;
}

template <typename T>
Tensor<T> sqrt(Tape<T>& tape, const Tensor<T>& a) {
  const bool track = detail::tracks<T>({&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a[i]);
  detail::check_finite("sqrt", out);
  if (track) {
    tape.record("sqrt", {a}, out, [a, out]() mutable {
      auto ga = a.ensure_grad();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (out[i] > T{0}) ga[i] += gy[i] / (T{2} * out[i]);
      }
    });
  }
  return out;
}

/// factor · (mask ⊙ a + (1 − mask) ⊙ b), mask broadcast over channels.
/// `mask` is [H, W] (shared by the batch) or [N, H, W]; it carries no gradient.
template <typename T>
Tensor<T> masked_blend(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                       const Tensor<T>& mask, T factor) {
  constexpr std::string_view op = "masked_blend";
  detail::require_rank(op, a, 4, "lhs");
  detail::require_same_shape(op, a, b);
  const std::size_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3), area = h * w;
  const bool per_sample = mask.defined() && mask.rank() == 3;
  const Shape expect = per_sample ? Shape{n, h, w} : Shape{h, w};
  if (!mask.defined() || mask.shape() != expect) {
    detail::shape_fail(op, "mask must be " + to_string(Shape{h, w}) + " or " +
                               to_string(Shape{n, h, w}) + ", got " +
                               (mask.defined() ? to_string(mask.shape()) : std::string("undefined")));
  }
  const bool track = detail::tracks<T>({&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  for (std::size_t i = 0; i < n; ++i) {
    const T* m = mask.values().data() + (per_sample ? i * area : 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * area;
      for (std::size_t k = 0; k < area; ++k) {
        out[base + k] = factor * (m[k] * a[base + k] + (T{1} - m[k]) * b[base + k]);
      }
    }
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {a, b}, out, [a, b, mask, out, n, c, area, per_sample, factor]() mutable {
      const auto gy = out.grad();
      std::span<T> ga, gb;
      if (a.requires_grad()) ga = a.ensure_grad();
      if (b.requires_grad()) gb = b.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* m = mask.values().data() + (per_sample ? i * area : 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (i * c + ch) * area;
          for (std::size_t k = 0; k < area; ++k) {
            if (!ga.empty()) ga[base + k] += factor * m[k] * gy[base + k];
            if (!gb.empty()) gb[base + k] += factor * (T{1} - m[k]) * gy[base + k];
          }
        }
      }
    });
  }
  return out;
}

/// Mean over the batch of w_i · CE(softmax(logits_i), label_i). Empty `weights` means all ones.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                                std::span<const T> weights = {}) {
  constexpr std::string_view op = "softmax_cross_entropy";
  detail::require_rank(op, logits, 2, "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    detail::shape_fail(op, std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                               " rows");
  }
  if (!weights.empty() && weights.size() != n) {
    detail::shape_fail(op, std::to_string(weights.size()) + " weights for " + std::to_string(n) +
                               " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::invalid_argument(std::string(op) + ": label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(k) + ")");
    }
  }
  const bool track = detail::tracks<T>({&logits});
  std::vector<T> probs(n * k);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.values().data() + i * k;
    T mx = z[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(z[j] - mx);
      s += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= s;
    const T w = weights.empty() ? T{1} : weights[i];
    total += w * (std::log(s) + mx - z[labels[static_cast<std::size_t>(i)]]);
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n), track);
  detail::check_finite(op, out);
  if (track) {
    std::vector<int> y(labels.begin(), labels.end());
    std::vector<T> wv(weights.begin(), weights.end());
    tape.record(op, {logits}, out,
                [logits, out, probs = std::move(probs), y = std::move(y), wv = std::move(wv), n,
                 k]() mutable {
                  auto gz = logits.ensure_grad();
                  const T scale = out.grad()[0] / static_cast<T>(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    const T w = (wv.empty() ? T{1} : wv[i]) * scale;
                    for (std::size_t j = 0; j < k; ++j) {
                      const T onehot = static_cast<std::size_t>(y[i]) == j ? T{1} : T{0};
                      gz[i * k + j] += w * (probs[i * k + j] - onehot);
                    }
                  }
                });
  }
  return out;
}

/// Row-wise L2 normalization of [N, D] (a rank-1 tensor is one row).
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& x) {
  constexpr std::string_view op = "l2_normalize";
  if (!x.defined() || (x.rank() != 1 && x.rank() != 2)) {
    detail::shape_fail(op, "expects a vector or [N, D] matrix");
  }
  const std::size_t d = x.shape().back(), rows = x.numel() / std::max<std::size_t>(d, 1);
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    const T nrm = std::sqrt(s);
    if (!(nrm > T{0})) {
      throw NumericError(std::string(op) + ": row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / nrm;
  }
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x}, out, [x, out, norms = std::move(norms), rows, d]() mutable {
      auto gx = x.ensure_grad();
      const auto gy = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += out[r * d + j] * gy[r * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          gx[r * d + j] += (gy[r * d + j] - out[r * d + j] * dot) / norms[r];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  const bool track = detail::tracks<T>({&x});
  T s{0};
  for (T v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s, track);
  detail::check_finite("sum", out);
  if (track) {
    tape.record("sum", {x}, out, [x, out]() mutable {
      auto gx = x.ensure_grad();
      const T g = out.grad()[0];
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  if (x.numel() == 0) detail::shape_fail("mean", "empty input");
  const bool track = detail::tracks<T>({&x});
  T s{0};
  for (T v : x.values()) s += v;
  const T inv = T{1} / static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(s * inv, track);
  detail::check_finite("mean", out);
  if (track) {
    tape.record("mean", {x}, out, [x, out, inv]() mutable {
      auto gx = x.ensure_grad();
      const T g = out.grad()[0] * inv;
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

/// Population variance of each column of [N, D] → [D].
template <typename T>
Tensor<T> variance_per_dim(Tape<T>& tape, const Tensor<T>& x) {
  constexpr std::string_view op = "variance_per_dim";
  detail::require_rank(op, x, 2, "input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n == 0) detail::shape_fail(op, "empty batch");
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros({d}, track);
  std::vector<T> mu(d, T{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x[i * d + j];
  for (auto& m : mu) m /= static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += (x[i * d + j] - mu[j]) * (x[i * d + j] - mu[j]);
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<T>(n);
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x}, out, [x, out, mu = std::move(mu), n, d]() mutable {
      auto gx = x.ensure_grad();
      const auto gy = out.grad();
      const T k = T{2} / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += gy[j] * k * (x[i * d + j] - mu[j]);
    });
  }
  return out;
}

/// Sample covariance of [N, D] with 1/(N−1) normalization → [D, D].
template <typename T>
Tensor<T> covariance_matrix(Tape<T>& tape, const Tensor<T>& x) {
  constexpr std::string_view op = "covariance_matrix";
  detail::require_rank(op, x, 2, "input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < 2) detail::shape_fail(op, "needs at least 2 rows, got " + std::to_string(n));
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d);
  detail::RowMat<T> centered = detail::ConstMatMap<T>(x.values().data(), N, D);
  const Eigen::Matrix<T, 1, Eigen::Dynamic> mu = centered.colwise().mean();
  centered.rowwise() -= mu;
  const bool track = detail::tracks<T>({&x});
  Tensor<T> out = Tensor<T>::zeros({d, d}, track);
  const T inv = T{1} / static_cast<T>(n - 1);
  detail::MatMap<T>(out.values().data(), D, D).noalias() = centered.transpose() * centered * inv;
  detail::check_finite(op, out);
  if (track) {
    tape.record(op, {x}, out, [x, out, centered = std::move(centered), N, D, inv]() mutable {
      detail::ConstMatMap<T> gy(out.grad().data(), D, D);
      detail::MatMap<T>(x.ensure_grad().data(), N, D).noalias() +=
          centered * (gy + gy.transpose()) * inv;
    });
  }
  return out;
}

/// Row-wise softmax of a plain [N, K] buffer, outside the tape.
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t k) {
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r * k < logits.size(); ++r) {
    const T* z = logits.data() + r * k;
    T mx = z[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = std::exp(z[j] - mx);
      s += out[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= s;
  }
  return out;
}

}  // namespace fscil
