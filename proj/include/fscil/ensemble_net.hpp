/**
 * @file ensemble_net.hpp
 * @brief Two-branch multi-input multi-output network.
 *
 * Each branch owns its first convolution (c1, c2) and its cosine classifier
 * head (d1, d2); everything in between is a shared residual trunk. During
 * training the two branch feature maps are combined by the mixing block
 * before entering the trunk; at inference both branches see the same image
 * and the two heads' probabilities are averaged.
 *
 * With `ensemble = false` the net degenerates to an ordinary single-branch
 * classifier (c1, trunk, d1), which is the ablation baseline.
 */
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fscil/mix.hpp"
#include "fscil/ops.hpp"
#include "fscil/random.hpp"
#include "fscil/tensor.hpp"

namespace fscil {

enum class NormKind { batch, group };

inline std::string to_string(NormKind k) { return k == NormKind::batch ? "batch" : "group"; }

struct BackboneConfig {
  std::size_t in_channels = 3;
  NormKind norm = NormKind::batch;
  std::vector<std::size_t> stage_channels{8, 16, 32};
  std::size_t blocks_per_stage = 1;
  std::size_t group_channels = 4;  // channels per group (group norm only)

  void validate() const {
    if (in_channels == 0) throw std::invalid_argument("backbone: in_channels must be >= 1");
    if (stage_channels.empty()) throw std::invalid_argument("backbone: at least one stage required");
    if (group_channels == 0) throw std::invalid_argument("backbone: group_channels must be >= 1");
    for (auto c : stage_channels) {
      if (c == 0) throw std::invalid_argument("backbone: stage widths must be >= 1");
      if (norm == NormKind::group && c % group_channels != 0) {
        throw std::invalid_argument("backbone: stage width " + std::to_string(c) +
                                    " is not a positive multiple of group_channels " +
                                    std::to_string(group_channels));
      }
    }
  }
};

struct NetConfig {
  BackboneConfig backbone;
  bool ensemble = true;
  double cosine_scale = 16.0;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class EnsembleNet {
 public:
  struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;  // may be undefined
    std::size_t padding = 1;
  };
  struct Norm {
    Tensor<T> gamma;
    Tensor<T> beta;
    std::size_t groups = 1;      // group norm
    Tensor<T> running_mean;      // batch norm
    Tensor<T> running_var;
  };
  struct Block {
    Conv conv1;
    Norm norm1;
    Conv conv2;
    Norm norm2;
  };
  struct Stage {
    std::optional<std::pair<Conv, Norm>> transition;
    std::vector<Block> blocks;
  };

  EnsembleNet(NetConfig cfg, std::size_t num_classes, Rng& init_rng) : cfg_(std::move(cfg)) {
    cfg_.backbone.validate();
    if (!(cfg_.cosine_scale > 0.0)) throw std::invalid_argument("net: cosine_scale must be positive");
    const auto& bb = cfg_.backbone;
    const std::size_t width0 = bb.stage_channels.front();
    // Creation order fixes the init stream: c1, trunk, d1, then c2, d2. A
    // single-branch net therefore shares c1/trunk/d1 values with its ensemble twin.
    branch_convs_.push_back(make_conv(bb.in_channels, width0, 3, true, init_rng));
    stem_norm_ = make_norm(width0);
    std::size_t prev = width0;
    for (std::size_t s = 0; s < bb.stage_channels.size(); ++s) {
      Stage stage;
      const std::size_t c = bb.stage_channels[s];
      if (c != prev) stage.transition = std::make_pair(make_conv(prev, c, 3, false, init_rng), make_norm(c));
      for (std::size_t b = 0; b < bb.blocks_per_stage; ++b) {
        Block blk{make_conv(c, c, 3, false, init_rng), make_norm(c), make_conv(c, c, 3, false, init_rng),
                  make_norm(c)};
        stage.blocks.push_back(std::move(blk));
      }
      stages_.push_back(std::move(stage));
      prev = c;
    }
    feature_dim_ = prev;
    heads_.push_back(make_head(num_classes, init_rng));
    if (cfg_.ensemble) {
      branch_convs_.push_back(make_conv(bb.in_channels, width0, 3, true, init_rng));
      heads_.push_back(make_head(num_classes, init_rng));
    }
  }

  const NetConfig& config() const { return cfg_; }
  std::size_t num_branches() const { return branch_convs_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t num_classes() const { return heads_.front().dim(0); }
  T cosine_scale() const { return static_cast<T>(cfg_.cosine_scale); }

  Tensor<T>& head(std::size_t i) { return heads_.at(i); }
  const Tensor<T>& head(std::size_t i) const { return heads_.at(i); }

  /// c_i(x): branch-specific input convolution.
  Tensor<T> branch(Tape<T>& tape, std::size_t i, const Tensor<T>& x) const {
    const auto& c = branch_convs_.at(i);
    return conv2d(tape, x, c.weight, c.bias, {1, c.padding});
  }

  /// Shared trunk: feature maps at branch resolution → pooled [N, D] features.
  /// `training` selects batch statistics (and running-estimate updates) for batch norm.
  Tensor<T> trunk(Tape<T>& tape, const Tensor<T>& features, bool training) const {
    const auto norm = [&](const Tensor<T>& x, const Norm& n) { return apply_norm(tape, x, n, training); };
    Tensor<T> y = relu(tape, norm(features, stem_norm_));
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const auto& stage = stages_[s];
      if (s > 0) y = max_pool2d(tape, y, 2);
      if (stage.transition) {
        y = relu(tape, norm(apply_conv(tape, y, stage.transition->first), stage.transition->second));
      }
      for (const auto& blk : stage.blocks) {
        Tensor<T> h = relu(tape, norm(apply_conv(tape, y, blk.conv1), blk.norm1));
        h = norm(apply_conv(tape, h, blk.conv2), blk.norm2);
        y = relu(tape, add(tape, y, h));
      }
    }
    return global_avg_pool(tape, y);
  }

  std::vector<NamedParam<T>> named_parameters() const {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < branch_convs_.size(); ++i) {
      push_conv(out, "branch" + std::to_string(i) + ".conv", branch_convs_[i]);
    }
    push_norm(out, "trunk.stem.norm", stem_norm_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "trunk.stage" + std::to_string(s);
      if (stages_[s].transition) {
        push_conv(out, p + ".transition.conv", stages_[s].transition->first);
        push_norm(out, p + ".transition.norm", stages_[s].transition->second);
      }
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        const std::string q = p + ".block" + std::to_string(b);
        const auto& blk = stages_[s].blocks[b];
        push_conv(out, q + ".conv1", blk.conv1);
        push_norm(out, q + ".norm1", blk.norm1);
        push_conv(out, q + ".conv2", blk.conv2);
        push_norm(out, q + ".norm2", blk.norm2);
      }
    }
    for (std::size_t i = 0; i < heads_.size(); ++i) {
      out.push_back({"head" + std::to_string(i) + ".weight", heads_[i]});
    }
    return out;
  }

  /// Batch-norm running estimates (empty under group norm). Not trained.
  std::vector<NamedParam<T>> named_buffers() const {
    std::vector<NamedParam<T>> out;
    push_buffers(out, "trunk.stem.norm", stem_norm_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "trunk.stage" + std::to_string(s);
      if (stages_[s].transition) push_buffers(out, p + ".transition.norm", stages_[s].transition->second);
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        const std::string q = p + ".block" + std::to_string(b);
        push_buffers(out, q + ".norm1", stages_[s].blocks[b].norm1);
        push_buffers(out, q + ".norm2", stages_[s].blocks[b].norm2);
      }
    }
    return out;
  }

  /// Re-estimates the batch-norm running statistics from inference-mode trunk
  /// inputs c1(x) + c2(x), averaging per-chunk statistics over `x`. Training
  /// sees mixed features whose statistics differ from that sum.
  void recalibrate_norm_stats(const Tensor<T>& x, std::size_t chunk = 64) {
    auto buffers = named_buffers();
    if (buffers.empty()) return;
    if (x.rank() != 4 || x.dim(0) < 2) throw ShapeError("recalibrate_norm_stats: need an NCHW batch of >= 2 images");
    NoGradGuard guard;
    const std::size_t n = x.dim(0), per = x.numel() / n;
    chunk = std::max<std::size_t>(chunk, 2);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (std::size_t s = 0; s < n; s += chunk) spans.emplace_back(s, std::min(chunk, n - s));
    if (spans.size() > 1 && spans.back().second < 2) {  // fold a lone trailing image into its neighbour
      spans[spans.size() - 2].second += spans.back().second;
      spans.pop_back();
    }
    std::vector<std::vector<T>> sum_mean, sum_var;
    for (const auto& b : buffers) {
      auto& dst = b.name.ends_with("running_mean") ? sum_mean : sum_var;
      dst.emplace_back(b.tensor.numel(), T{0});
    }
    for (const auto& [start, count] : spans) {
      Shape shape = x.shape();
      shape[0] = count;
      const auto v = x.values();
      const Tensor<T> xb = Tensor<T>::from(
          shape, std::vector<T>(v.begin() + static_cast<std::ptrdiff_t>(start * per),
                                v.begin() + static_cast<std::ptrdiff_t>((start + count) * per)));
      Tape<T> tape;
      Tensor<T> in = branch(tape, 0, xb);
      if (num_branches() > 1) in = add(tape, in, branch(tape, 1, xb));
      norm_momentum_ = T{1};
      trunk(tape, in, true);
      norm_momentum_ = T(0.1);
      const T w = static_cast<T>(count) / static_cast<T>(n);
      std::size_t im = 0, iv = 0;
      for (const auto& b : buffers) {
        auto& acc = b.name.ends_with("running_mean") ? sum_mean[im++] : sum_var[iv++];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * b.tensor[i];
      }
    }
    std::size_t im = 0, iv = 0;
    for (auto& b : buffers) {
      const auto& acc = b.name.ends_with("running_mean") ? sum_mean[im++] : sum_var[iv++];
      std::copy(acc.begin(), acc.end(), b.tensor.values().begin());
    }
  }

  /// Parameters followed by buffers: everything a checkpoint must carry.
  std::vector<NamedParam<T>> named_state() const {
    auto out = named_parameters();
    for (auto& b : named_buffers()) out.push_back(std::move(b));
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  /// Branch convolutions and trunk: everything except the classifier heads.
  std::vector<Tensor<T>> backbone_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& p : named_parameters()) {
      if (p.name.rfind("head", 0) != 0) out.push_back(p.tensor);
    }
    return out;
  }

  std::vector<Tensor<T>> head_parameters() const { return heads_; }

  /// A frozen backbone also stops updating batch-norm running estimates;
  /// training-mode passes still normalize with batch statistics.
  void set_backbone_trainable(bool trainable) {
    for (auto& p : backbone_parameters()) {
      p.set_requires_grad(trainable);
      if (!trainable) p.clear_grad();
    }
    update_norm_stats_ = trainable;
  }

  /// Re-projects every head row onto the unit sphere.
  void normalize_heads() {
    for (auto& h : heads_) {
      const std::size_t d = h.dim(1);
      for (std::size_t r = 0; r < h.dim(0); ++r) {
        T s{0};
        for (std::size_t j = 0; j < d; ++j) s += h[r * d + j] * h[r * d + j];
        const T n = std::sqrt(s);
        if (!(n > T{0})) throw NumericError("normalize_heads: zero row " + std::to_string(r));
        for (std::size_t j = 0; j < d; ++j) h[r * d + j] /= n;
      }
    }
  }

  /// Appends the same rows to every head. Rows must have feature_dim entries.
  void append_head_rows(const std::vector<std::vector<T>>& rows) {
    for (auto& h : heads_) {
      std::vector<T> v(h.values().begin(), h.values().end());
      for (const auto& r : rows) {
        if (r.size() != feature_dim_) throw ShapeError("append_head_rows: row width mismatch");
        v.insert(v.end(), r.begin(), r.end());
      }
      const bool rg = h.requires_grad();
      h = Tensor<T>::from({h.dim(0) + rows.size(), feature_dim_}, std::move(v), rg);
    }
  }

  /// Replaces a parameter or buffer's values by name (used by checkpoint loading).
  void assign(const std::string& name, const Shape& shape, std::vector<T> values) {
    for (auto& p : named_state()) {
      if (p.name != name) continue;
      if (p.name.rfind("head", 0) == 0 && p.tensor.shape() != shape) {
        const std::size_t idx = static_cast<std::size_t>(std::stoul(p.name.substr(4)));
        heads_.at(idx) = Tensor<T>::from(shape, std::move(values), p.tensor.requires_grad());
        return;
      }
      if (p.tensor.shape() != shape) {
        throw ShapeError("assign: " + name + " expects " + to_string(p.tensor.shape()) + ", got " +
                         to_string(shape));
      }
      std::copy(values.begin(), values.end(), p.tensor.values().begin());
      return;
    }
    throw std::invalid_argument("assign: unknown parameter " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }

  /// Parameters that exist only because of the second branch (c2 and d2).
  std::size_t branch_specific_parameter_count() const {
    if (num_branches() < 2) return 0;
    std::size_t n = heads_[1].numel() + branch_convs_[1].weight.numel();
    if (branch_convs_[1].bias.defined()) n += branch_convs_[1].bias.numel();
    return n;
  }

  /// Single-branch view sharing c1, trunk and d1 storage with this net.
  EnsembleNet single_branch_view() const {
    EnsembleNet copy = *this;
    copy.cfg_.ensemble = false;
    copy.branch_convs_.resize(1);
    copy.heads_.resize(1);
    return copy;
  }

 private:
  Conv make_conv(std::size_t in, std::size_t out, std::size_t k, bool with_bias, Rng& rng) const {
    const double fan_in = static_cast<double>(in * k * k);
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<T> w(out * in * k * k);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    Conv c;
    c.weight = Tensor<T>::from({out, in, k, k}, std::move(w), true);
    if (with_bias) c.bias = Tensor<T>::zeros({out}, true);
    c.padding = k / 2;
    return c;
  }

  Norm make_norm(std::size_t c) const {
    Norm n{Tensor<T>::full({c}, T{1}, true), Tensor<T>::zeros({c}, true), 1, {}, {}};
    if (cfg_.backbone.norm == NormKind::group) {
      n.groups = c / cfg_.backbone.group_channels;
    } else {
      n.running_mean = Tensor<T>::zeros({c});
      n.running_var = Tensor<T>::full({c}, T{1});
    }
    return n;
  }

  Tensor<T> make_head(std::size_t classes, Rng& rng) const {
    std::vector<T> w(classes * feature_dim_);
    for (std::size_t r = 0; r < classes; ++r) {
      double s = 0.0;
      std::vector<double> row(feature_dim_);
      for (auto& v : row) {
        v = rng.normal();
        s += v * v;
      }
      s = std::sqrt(s);
      for (std::size_t j = 0; j < feature_dim_; ++j) w[r * feature_dim_ + j] = static_cast<T>(row[j] / s);
    }
    return Tensor<T>::from({classes, feature_dim_}, std::move(w), true);
  }

  static Tensor<T> apply_conv(Tape<T>& tape, const Tensor<T>& x, const Conv& c) {
    return conv2d(tape, x, c.weight, c.bias, {1, c.padding});
  }
  Tensor<T> apply_norm(Tape<T>& tape, const Tensor<T>& x, const Norm& n, bool training) const {
    if (n.running_mean.defined()) {
      if (training && !update_norm_stats_) return batch_norm(tape, x, n.gamma, n.beta, Tensor<T>{}, Tensor<T>{}, true);
      return batch_norm(tape, x, n.gamma, n.beta, n.running_mean, n.running_var, training, norm_momentum_);
    }
    return group_norm(tape, x, n.gamma, n.beta, n.groups);
  }
  static void push_conv(std::vector<NamedParam<T>>& out, const std::string& p, const Conv& c) {
    out.push_back({p + ".weight", c.weight});
    if (c.bias.defined()) out.push_back({p + ".bias", c.bias});
  }
  static void push_norm(std::vector<NamedParam<T>>& out, const std::string& p, const Norm& n) {
    out.push_back({p + ".gamma", n.gamma});
    out.push_back({p + ".beta", n.beta});
  }
  static void push_buffers(std::vector<NamedParam<T>>& out, const std::string& p, const Norm& n) {
    if (!n.running_mean.defined()) return;
    out.push_back({p + ".running_mean", n.running_mean});
    out.push_back({p + ".running_var", n.running_var});
  }

  NetConfig cfg_;
  std::vector<Conv> branch_convs_;
  Norm stem_norm_;
  std::vector<Stage> stages_;
  std::vector<Tensor<T>> heads_;
  std::size_t feature_dim_ = 0;
  T norm_momentum_ = T(0.1);
  bool update_norm_stats_ = true;
};

/// logit_c = scale · ⟨f/‖f‖, w_c/‖w_c‖⟩ for features [N, D] and head [K, D].
template <typename T>
Tensor<T> cosine_logits(Tape<T>& tape, const Tensor<T>& feature, const Tensor<T>& head, T scale) {
  return fscil::scale(tape, linear(tape, l2_normalize(tape, feature), l2_normalize(tape, head), Tensor<T>{}),
                      scale);
}

/// w_r(κ)·CE(y1) + w_r(1−κ)·CE(y2), with one κ per sample.
template <typename T>
Tensor<T> ensemble_loss(Tape<T>& tape, const Tensor<T>& logits1, const Tensor<T>& logits2,
                        std::span<const int> y1, std::span<const int> y2,
                        std::span<const double> kappa_eff, double r) {
  if (kappa_eff.size() != y1.size()) {
    throw ShapeError("ensemble_loss: " + std::to_string(kappa_eff.size()) + " mask ratios for " +
                     std::to_string(y1.size()) + " samples");
  }
  std::vector<T> w1(kappa_eff.size()), w2(kappa_eff.size());
  for (std::size_t i = 0; i < kappa_eff.size(); ++i) {
    w1[i] = static_cast<T>(weight_fn(kappa_eff[i], r));
    w2[i] = static_cast<T>(weight_fn(1.0 - kappa_eff[i], r));
  }
  Tensor<T> a = softmax_cross_entropy<T>(tape, logits1, y1, w1);
  Tensor<T> b = softmax_cross_entropy<T>(tape, logits2, y2, w2);
  return add(tape, a, b);
}

/// Single-mask convenience form.
template <typename T>
Tensor<T> ensemble_loss(Tape<T>& tape, const Tensor<T>& logits1, const Tensor<T>& logits2,
                        std::span<const int> y1, std::span<const int> y2, double kappa_eff, double r) {
  std::vector<double> k(y1.size(), kappa_eff);
  return ensemble_loss<T>(tape, logits1, logits2, y1, y2, k, r);
}

template <typename T>
struct TrainOutputs {
  Tensor<T> logits1;
  Tensor<T> logits2;  // undefined for a single-branch net
  Tensor<T> pooled;
};

/// Mixed forward pass. `masks` is [N, H, W] or [H, W] at branch resolution;
/// single-branch nets ignore x2 and the masks. `batch_stats = false` normalizes
/// with the running estimates.
template <typename T>
TrainOutputs<T> forward_train(Tape<T>& tape, const EnsembleNet<T>& net, const Tensor<T>& x1,
                              const Tensor<T>& x2, const Tensor<T>& masks, bool batch_stats = true) {
  TrainOutputs<T> out;
  Tensor<T> trunk_in;
  if (net.num_branches() == 1) {
    trunk_in = net.branch(tape, 0, x1);
  } else {
    if (x1.shape() != x2.shape()) {
      throw ShapeError("forward_train: inputs differ in shape: " + to_string(x1.shape()) + " vs " +
                       to_string(x2.shape()));
    }
    trunk_in = mix_features(tape, net.branch(tape, 0, x1), net.branch(tape, 1, x2), masks);
  }
  out.pooled = net.trunk(tape, trunk_in, batch_stats);
  out.logits1 = cosine_logits(tape, out.pooled, net.head(0), net.cosine_scale());
  if (net.num_branches() > 1) out.logits2 = cosine_logits(tape, out.pooled, net.head(1), net.cosine_scale());
  return out;
}

/// Pooled trunk features in inference mode: c1(x) + c2(x) feeds the trunk.
template <typename T>
Tensor<T> extract_features(const EnsembleNet<T>& net, const Tensor<T>& x) {
  NoGradGuard guard;
  Tape<T> tape;
  Tensor<T> trunk_in = net.branch(tape, 0, x);
  if (net.num_branches() > 1) trunk_in = add(tape, trunk_in, net.branch(tape, 1, x));
  return net.trunk(tape, trunk_in, false);
}

/// Class probabilities [N, K]: the even average of each head's softmax.
template <typename T>
Tensor<T> predict(const EnsembleNet<T>& net, const Tensor<T>& x) {
  if (net.num_classes() == 0) throw std::logic_error("predict: net has no classes");
  NoGradGuard guard;
  Tape<T> tape;
  const Tensor<T> pooled = extract_features(net, x);
  const std::size_t k = net.num_classes();
  std::vector<T> probs(pooled.dim(0) * k, T{0});
  for (std::size_t i = 0; i < net.num_branches(); ++i) {
    const Tensor<T> logits = cosine_logits(tape, pooled, net.head(i), net.cosine_scale());
    const auto p = softmax_rows<T>(logits.values(), k);
    for (std::size_t j = 0; j < probs.size(); ++j) probs[j] += p[j];
  }
  for (auto& v : probs) v /= static_cast<T>(net.num_branches());
  return Tensor<T>::from({pooled.dim(0), k}, std::move(probs));
}

/// Row-wise argmax; ties go to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& probs) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fscil
