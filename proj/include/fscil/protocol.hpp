/**
 * @file protocol.hpp
 * @brief Session-by-session incremental learning: base training, classifier
 *        expansion, exemplar replay, head fine-tuning and evaluation.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fscil/data.hpp"
#include "fscil/ensemble_net.hpp"
#include "fscil/mix.hpp"
#include "fscil/optim.hpp"
#include "fscil/patchmix.hpp"
#include "fscil/random.hpp"
#include "fscil/ssl.hpp"

namespace fscil {

class ProtocolError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProtocolConfig {
  std::uint64_t seed = 1;

  std::size_t batch_size = 32;
  std::size_t base_epochs = 30;
  double base_lr = 0.01;
  // Per-sample probability that both branches receive the same image.
  double base_repeat_prob = 0.0;
  double inc_repeat_prob = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;
  double warmup_frac = 0.05;
  std::vector<double> milestones{0.6, 0.8};
  double decay = 0.1;

  std::size_t inc_epochs = 10;
  double inc_lr = 0.0125;
  double inc_backbone_lr = 0.0;  // 0 keeps the backbone frozen
  std::size_t support_oversample = 1;
  std::size_t n_init = 2;

  std::size_t replay_m = 5;

  MixWeightParams mix;
  PatchMixConfig patchmix;  // mode == off disables augmentation
  bool patchmix_base = true;

  bool ssl_enabled = true;
  bool ssl_all_sessions = false;
  bool ssl_per_image_transform = false;
  SslParams ssl;
};

struct MetricRecord {
  std::size_t session = 0;
  double top1 = 0.0;
  double base_acc = 0.0;
  std::optional<double> new_acc;
  std::optional<double> harmonic_mean;
  std::optional<double> mean_acc;
};

/// Per-class exemplar store, kept in first-seen class order.
struct ReplayBuffer {
  std::size_t capacity_per_class = 5;
  std::vector<std::pair<int, LabeledImageSet>> classes;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, s] : classes) n += s.size();
    return n;
  }

  const LabeledImageSet* find(int cls) const {
    for (const auto& [c, s] : classes) {
      if (c == cls) return &s;
    }
    return nullptr;
  }

  void put(int cls, LabeledImageSet set) {
    for (auto& [c, s] : classes) {
      if (c == cls) {
        s = std::move(set);
        return;
      }
    }
    classes.emplace_back(cls, std::move(set));
  }

  LabeledImageSet as_set() const {
    LabeledImageSet out;
    for (const auto& [c, s] : classes) out = concat(out, s);
    return out;
  }
};

template <typename T>
struct SessionState {
  EnsembleNet<T> net;
  ReplayBuffer buffer;
  std::vector<int> seen_classes;  // head row i ↔ seen_classes[i]
  std::vector<int> base_classes;
  LabeledImageSet cumulative_query;
  std::vector<MetricRecord> history;
  std::vector<double> loss_trace;  // per optimizer step, all sessions
  PatchMixStats patchmix_stats;

  int row_of(int cls) const {
    const auto it = std::find(seen_classes.begin(), seen_classes.end(), cls);
    if (it == seen_classes.end()) return -1;
    return static_cast<int>(it - seen_classes.begin());
  }
};

// ---------------------------------------------------------------------------
// Exemplar selection

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

/// K-means (k = m, k-means++ seeding, at most `max_iter` Lloyd rounds) over the
/// rows of `features`; returns the index nearest each centroid, falling back to
/// the next-nearest unused index on collisions. Fewer than m rows → all rows.
inline std::vector<std::size_t> select_exemplars(const std::vector<std::vector<double>>& features, std::size_t m,
                                                 Rng& rng, std::size_t max_iter = 50) {
  if (m == 0) throw std::invalid_argument("select_exemplars: m must be >= 1");
  const std::size_t n = features.size();
  if (n <= m) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  const std::size_t d = features[0].size();
  std::vector<std::vector<double>> centroids;
  centroids.push_back(features[rng.index(n)]);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  while (centroids.size() < m) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], detail::sq_dist(features[i], centroids.back()));
      total += best[i];
    }
    std::size_t pick = rng.index(n);
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += best[i];
        if (target < acc) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(features[pick]);
  }
  std::vector<std::size_t> assign(n, 0);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < m; ++c) {
        const double dd = detail::sq_dist(features[i], centroids[c]);
        if (dd < bd) {
          bd = dd;
          arg = c;
        }
      }
      if (assign[i] != arg) changed = true;
      assign[i] = arg;
    }
    if (!changed) break;
    for (std::size_t c = 0; c < m; ++c) {
      std::vector<double> sum(d, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != c) continue;
        for (std::size_t j = 0; j < d; ++j) sum[j] += features[i][j];
        ++count;
      }
      if (count == 0) continue;  // empty cluster keeps its centroid
      for (auto& v : sum) v /= static_cast<double>(count);
      centroids[c] = std::move(sum);
    }
  }
  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  for (const auto& c : centroids) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return detail::sq_dist(features[a], c) < detail::sq_dist(features[b], c);
    });
    for (auto i : order) {
      if (!used[i]) {
        used[i] = true;
        chosen.push_back(i);
        break;
      }
    }
  }
  return chosen;
}

template <typename T>
std::vector<std::vector<double>> pooled_features(const EnsembleNet<T>& net, const LabeledImageSet& set,
                                                 std::size_t batch = 128) {
  std::vector<std::vector<double>> out;
  out.reserve(set.size());
  for (std::size_t start = 0; start < set.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i) idx.push_back(i);
    const Tensor<T> f = extract_features(net, set.batch<T>(idx));
    const std::size_t d = f.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.emplace_back(f.values().begin() + static_cast<std::ptrdiff_t>(r * d),
                       f.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  return out;
}

/// Selects up to m exemplars of one class from `images` using the current net.
template <typename T>
LabeledImageSet exemplars_for_class(const EnsembleNet<T>& net, const LabeledImageSet& images, std::size_t m,
                                    Rng& rng) {
  const auto idx = select_exemplars(pooled_features(net, images), m, rng);
  return images.subset(idx);
}

// ---------------------------------------------------------------------------
// Classifier expansion

/// Adds one head row per new class (identical in both heads): the normalized
/// mean pooled feature of n_init randomly drawn support samples. A zero mean
/// falls back to the first drawn sample's normalized feature.
template <typename T>
void expand_classifier(EnsembleNet<T>& net, std::vector<int>& seen_classes, const std::vector<int>& new_classes,
                       const LabeledImageSet& support, std::size_t n_init, Rng& rng) {
  if (n_init == 0) throw std::invalid_argument("expand_classifier: n_init must be >= 1");
  std::vector<std::vector<T>> rows;
  for (int cls : new_classes) {
    if (std::find(seen_classes.begin(), seen_classes.end(), cls) != seen_classes.end()) {
      throw ProtocolError("expand_classifier: class " + std::to_string(cls) + " is already present");
    }
    const auto idx = support.indices_of(cls);
    if (idx.size() < n_init) {
      throw ProtocolError("expand_classifier: class " + std::to_string(cls) + " has " +
                          std::to_string(idx.size()) + " support samples, need " + std::to_string(n_init));
    }
    const auto perm = rng.permutation(idx.size());
    std::vector<std::size_t> drawn;
    for (std::size_t k = 0; k < n_init; ++k) drawn.push_back(idx[perm[k]]);
    const auto feats = pooled_features(net, support.subset(drawn));
    const std::size_t d = feats[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& f : feats) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += f[j] / static_cast<double>(feats.size());
    }
    auto norm_of = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    };
    double scale_ref = 0.0;
    for (const auto& f : feats) scale_ref = std::max(scale_ref, norm_of(f));
    std::vector<double> chosen = mean;
    if (norm_of(mean) <= 1e-9 * std::max(scale_ref, 1e-300)) chosen = feats[0];
    const double nrm = norm_of(chosen);
    if (!(nrm > 0.0)) throw NumericError("expand_classifier: class " + std::to_string(cls) + " has zero features");
    std::vector<T> row(d);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<T>(chosen[j] / nrm);
    rows.push_back(std::move(row));
  }
  net.append_head_rows(rows);
  seen_classes.insert(seen_classes.end(), new_classes.begin(), new_classes.end());
}

// ---------------------------------------------------------------------------
// Evaluation

/// Accuracy of the net on `set` whose labels are class ids mapped through `classes`.
template <typename T>
std::vector<bool> correctness(const EnsembleNet<T>& net, const LabeledImageSet& set, const std::vector<int>& classes,
                              std::size_t batch = 128) {
  std::vector<bool> out;
  out.reserve(set.size());
  for (std::size_t start = 0; start < set.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i) idx.push_back(i);
    const auto pred = argmax_rows(predict(net, set.batch<T>(idx)));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int label = set.labels[idx[r]];
      const auto it = std::find(classes.begin(), classes.end(), label);
      if (it == classes.end()) {
        throw ProtocolError("evaluate: query label " + std::to_string(label) + " is not a seen class");
      }
      out.push_back(pred[r] == static_cast<int>(it - classes.begin()));
    }
  }
  return out;
}

template <typename T>
double accuracy(const EnsembleNet<T>& net, const LabeledImageSet& set, const std::vector<int>& classes) {
  if (set.empty()) return 0.0;
  const auto ok = correctness(net, set, classes);
  return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

/// Builds a metric record from per-query correctness and the base-class membership.
inline MetricRecord metrics_from(std::size_t session, const std::vector<bool>& ok, const std::vector<int>& labels,
                                 const std::vector<int>& base_classes) {
  std::size_t base_n = 0, base_ok = 0, new_n = 0, new_ok = 0;
  for (std::size_t i = 0; i < ok.size(); ++i) {
    const bool is_base = std::find(base_classes.begin(), base_classes.end(), labels[i]) != base_classes.end();
    (is_base ? base_n : new_n)++;
    if (ok[i]) (is_base ? base_ok : new_ok)++;
  }
  MetricRecord m;
  m.session = session;
  m.top1 = ok.empty() ? 0.0 : static_cast<double>(base_ok + new_ok) / static_cast<double>(ok.size());
  m.base_acc = base_n ? static_cast<double>(base_ok) / static_cast<double>(base_n) : 0.0;
  if (new_n > 0) {
    const double b = m.base_acc, n = static_cast<double>(new_ok) / static_cast<double>(new_n);
    m.new_acc = n;
    m.harmonic_mean = (b > 0.0 && n > 0.0) ? 2.0 * b * n / (b + n) : 0.0;
    m.mean_acc = 0.5 * (b + n);
  }
  return m;
}

template <typename T>
MetricRecord evaluate(const SessionState<T>& state, const LabeledImageSet& queries, std::size_t session) {
  if (queries.empty()) throw ProtocolError("evaluate: no queries");
  const auto ok = correctness(state.net, queries, state.seen_classes);
  return metrics_from(session, ok, queries.labels, state.base_classes);
}

/// First-session top-1 minus last-session top-1, in percentage points. Records hold fractions.
inline double performance_drop(const std::vector<MetricRecord>& history) {
  if (history.size() < 2) throw std::invalid_argument("performance_drop: needs at least 2 sessions");
  return (history.front().top1 - history.back().top1) * 100.0;
}

/// Same, from session accuracies already expressed in percent.
inline double performance_drop_percent(std::span<const double> top1_percent) {
  if (top1_percent.size() < 2) throw std::invalid_argument("performance_drop: needs at least 2 sessions");
  return top1_percent.front() - top1_percent.back();
}

/// (train accuracy, test accuracy) of the current model.
template <typename T>
std::pair<double, double> overfit_gap_probe(const SessionState<T>& state, const LabeledImageSet& train,
                                            const LabeledImageSet& test) {
  return {accuracy(state.net, train, state.seen_classes), accuracy(state.net, test, state.seen_classes)};
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

struct ParamGroup {
  double lr_scale = 1.0;  // relative to the schedule's current rate
};

template <typename T>
struct EpochPlan {
  const LabeledImageSet* pool = nullptr;       // labels already mapped to head rows
  std::vector<bool> augment;                   // per pool sample
  std::span<const std::vector<float>> bank;    // PatchMix backgrounds
  std::size_t epochs = 0;
  LrSchedule schedule;
  bool train_backbone = true;
  double backbone_lr = 0.0;
  double head_lr = 0.0;
  bool use_schedule = true;
  bool ssl = false;
  double repeat_prob = 0.0;
  std::uint32_t session = 0;
};

template <typename T>
void train_epochs(SessionState<T>& st, const ProtocolConfig& cfg, const EpochPlan<T>& plan) {
  auto& net = st.net;
  const auto& pool = *plan.pool;
  if (pool.empty() || plan.epochs == 0) return;
  net.set_backbone_trainable(plan.train_backbone);
  for (auto& h : net.head_parameters()) h.set_requires_grad(true);
  std::vector<Tensor<T>> heads = net.head_parameters();
  std::vector<Tensor<T>> backbone = plan.train_backbone ? net.backbone_parameters() : std::vector<Tensor<T>>{};
  SgdState<T> head_opt{static_cast<T>(plan.head_lr), static_cast<T>(cfg.momentum),
                       static_cast<T>(cfg.weight_decay), cfg.nesterov, {}};
  SgdState<T> bb_opt{static_cast<T>(plan.backbone_lr), static_cast<T>(cfg.momentum),
                     static_cast<T>(cfg.weight_decay), cfg.nesterov, {}};

  Rng sampling(cfg.seed, Purpose::sampling, plan.session);
  Rng mask_rng(cfg.seed, Purpose::mask, plan.session);
  Rng patch_rng(cfg.seed, Purpose::patchmix, plan.session);
  Rng ssl_rng(cfg.seed, Purpose::ssl_transform, plan.session);

  const std::size_t n = pool.size(), bsz = std::max<std::size_t>(1, cfg.batch_size);
  const bool ensemble = net.num_branches() > 1;
  const bool da = cfg.patchmix.mode != SamplingMode::off;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    const double factor = plan.use_schedule ? plan.schedule.at(epoch, plan.epochs) / plan.schedule.base_lr : 1.0;
    head_opt.learning_rate = static_cast<T>(plan.head_lr * factor);
    bb_opt.learning_rate = static_cast<T>(plan.backbone_lr * factor);
    const auto order = sampling.permutation(n);
    for (std::size_t start = 0; start < n; start += bsz) {
      const std::size_t b = std::min(bsz, n - start);
      if (b < 2) continue;  // batch statistics need two samples
      std::vector<float> pixels;
      pixels.reserve(b * pool.image_size());
      std::vector<int> y1(b);
      for (std::size_t k = 0; k < b; ++k) {
        const std::size_t i = order[start + k];
        y1[k] = pool.labels[i];
        const auto img = pool.image(i);
        if (da && plan.augment[i]) {
          const LabeledImage target{{img.begin(), img.end()}, y1[k]};
          const auto aug = maybe_augment(target, plan.bank, cfg.patchmix, pool.channels, pool.height, pool.width,
                                         patch_rng, &st.patchmix_stats);
          pixels.insert(pixels.end(), aug.pixels.begin(), aug.pixels.end());
        } else {
          pixels.insert(pixels.end(), img.begin(), img.end());
        }
      }
      const Tensor<T> x1 =
          Tensor<T>::from({b, pool.channels, pool.height, pool.width}, std::vector<T>(pixels.begin(), pixels.end()));
      Tensor<T> x2;
      std::vector<int> y2;
      std::vector<MixMask> masks;
      std::vector<double> kappas;
      if (ensemble) {
        auto perm = mask_rng.permutation(b);
        if (plan.repeat_prob > 0.0) {
          for (std::size_t k = 0; k < b; ++k) {
            if (mask_rng.uniform() < plan.repeat_prob) perm[k] = k;
          }
        }
        const std::size_t per = pool.image_size();
        std::vector<T> v(b * per);
        y2.resize(b);
        for (std::size_t k = 0; k < b; ++k) {
          std::copy(pixels.begin() + static_cast<std::ptrdiff_t>(perm[k] * per),
                    pixels.begin() + static_cast<std::ptrdiff_t>((perm[k] + 1) * per),
                    v.begin() + static_cast<std::ptrdiff_t>(k * per));
          y2[k] = y1[perm[k]];
        }
        x2 = Tensor<T>::from(x1.shape(), std::move(v));
        for (std::size_t k = 0; k < b; ++k) {
          masks.push_back(make_cutmix_mask(pool.height, pool.width, cfg.mix, mask_rng));
          kappas.push_back(masks.back().kappa_eff);
        }
      }
      Tape<T> tape;
      TrainOutputs<T> out;
      Tensor<T> z2;
      const bool ssl_now = plan.ssl;
      if (ssl_now) {
        std::vector<ViewTransform> t1, t2;
        const std::size_t count = cfg.ssl_per_image_transform ? b : 1;
        for (std::size_t k = 0; k < count; ++k) {
          t1.push_back(sample_transform(ssl_rng));
          t2.push_back(sample_transform(ssl_rng));
        }
        auto views = build_views(tape, net, x1, x2, masks, t1, t2);
        out = std::move(views.view1);
        z2 = views.view2.pooled;
      } else {
        out = forward_train(tape, net, x1, x2, ensemble ? stack_masks<T>(masks) : Tensor<T>{});
      }
      Tensor<T> loss = ensemble ? ensemble_loss<T>(tape, out.logits1, out.logits2, y1, y2, kappas, cfg.mix.r)
                                : softmax_cross_entropy<T>(tape, out.logits1, y1);
      if (ssl_now) {
        loss = add(tape, loss, scale(tape, ssl_loss(tape, out.pooled, z2, cfg.ssl), static_cast<T>(cfg.ssl.gamma)));
      }
      backward(loss, tape);
      st.loss_trace.push_back(static_cast<double>(loss.item()));
      sgd_step(heads, head_opt);
      if (!backbone.empty()) sgd_step(backbone, bb_opt);
      net.normalize_heads();
    }
  }
  net.set_backbone_trainable(true);
  if (!backbone.empty() && pool.size() >= 2) {
    std::vector<std::size_t> all(pool.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    net.recalibrate_norm_stats(pool.template batch<T>(all), bsz);
  }
}

inline LabeledImageSet relabel(const LabeledImageSet& set, const std::vector<int>& classes) {
  LabeledImageSet out = set;
  for (auto& y : out.labels) {
    const auto it = std::find(classes.begin(), classes.end(), y);
    if (it == classes.end()) throw ProtocolError("training sample has unseen class " + std::to_string(y));
    y = static_cast<int>(it - classes.begin());
  }
  return out;
}

inline std::vector<std::vector<float>> image_bank(const LabeledImageSet& set) {
  std::vector<std::vector<float>> bank;
  bank.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) bank.emplace_back(set.image(i).begin(), set.image(i).end());
  return bank;
}

}  // namespace detail

/// Trains a fresh net on session 0, fills the replay buffer and records metrics.
template <typename T>
SessionState<T> run_base_session(const SessionSpec& spec, const ProtocolConfig& cfg, const NetConfig& net_cfg) {
  if (spec.index != 0) throw ProtocolError("run_base_session: expected session 0, got " + std::to_string(spec.index));
  if (spec.class_ids.empty() || spec.support.empty()) throw ProtocolError("run_base_session: empty session");
  {
    std::set<int> uniq(spec.class_ids.begin(), spec.class_ids.end());
    if (uniq.size() != spec.class_ids.size()) throw ProtocolError("run_base_session: duplicate class ids");
  }
  Rng init(cfg.seed, Purpose::init);
  SessionState<T> st{EnsembleNet<T>(net_cfg, spec.class_ids.size(), init), ReplayBuffer{cfg.replay_m, {}}, spec.class_ids,
                     spec.class_ids, spec.query, {}, {}, {}};

  const LabeledImageSet pool = detail::relabel(spec.support, st.seen_classes);
  const auto bank = detail::image_bank(spec.support);
  detail::EpochPlan<T> plan;
  plan.pool = &pool;
  plan.augment.assign(pool.size(), cfg.patchmix_base);
  plan.bank = bank;
  plan.epochs = cfg.base_epochs;
  plan.schedule = LrSchedule{cfg.base_lr, cfg.warmup_frac, cfg.milestones, cfg.decay};
  plan.train_backbone = true;
  plan.backbone_lr = cfg.base_lr;
  plan.head_lr = cfg.base_lr;
  plan.repeat_prob = cfg.base_repeat_prob;
  plan.ssl = cfg.ssl_enabled && cfg.ssl.gamma > 0.0;
  plan.session = 0;
  detail::train_epochs(st, cfg, plan);

  Rng ex_rng(cfg.seed, Purpose::exemplar, 0);
  for (int cls : spec.class_ids) {
    st.buffer.put(cls, exemplars_for_class(st.net, spec.support.subset(spec.support.indices_of(cls)), cfg.replay_m,
                                           ex_rng));
  }
  st.history.push_back(evaluate(st, st.cumulative_query, 0));
  return st;
}

/// Expands the classifier, fine-tunes on support ∪ replay, updates the buffer
/// and appends a metric record evaluated on all queries seen so far.
template <typename T>
void run_incremental_session(SessionState<T>& st, const SessionSpec& spec, const ProtocolConfig& cfg) {
  if (spec.index == 0) throw ProtocolError("run_incremental_session: session 0 is the base session");
  if (st.history.size() != spec.index) {
    throw ProtocolError("run_incremental_session: session " + std::to_string(spec.index) + " requested after " +
                        std::to_string(st.history.size()) + " completed sessions");
  }
  for (int c : spec.class_ids) {
    if (std::find(st.seen_classes.begin(), st.seen_classes.end(), c) != st.seen_classes.end()) {
      throw ProtocolError("run_incremental_session: class " + std::to_string(c) + " overlaps an earlier session");
    }
  }
  const auto session = static_cast<std::uint32_t>(spec.index);
  Rng init_rng(cfg.seed, Purpose::init, session);
  expand_classifier(st.net, st.seen_classes, spec.class_ids, spec.support, cfg.n_init, init_rng);

  LabeledImageSet raw_pool;
  std::vector<bool> augment;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, cfg.support_oversample); ++r) {
    raw_pool = concat(raw_pool, spec.support);
    augment.insert(augment.end(), spec.support.size(), true);
  }
  const LabeledImageSet replay = st.buffer.as_set();
  raw_pool = concat(raw_pool, replay);
  augment.insert(augment.end(), replay.size(), false);
  const LabeledImageSet pool = detail::relabel(raw_pool, st.seen_classes);

  LabeledImageSet base_bank_set;
  for (int c : st.base_classes) {
    if (const auto* s = st.buffer.find(c)) base_bank_set = concat(base_bank_set, *s);
  }
  const auto bank = detail::image_bank(base_bank_set);

  detail::EpochPlan<T> plan;
  plan.pool = &pool;
  plan.augment = std::move(augment);
  plan.bank = bank;
  plan.epochs = cfg.inc_epochs;
  plan.use_schedule = false;
  plan.schedule.base_lr = cfg.inc_lr;
  plan.train_backbone = cfg.inc_backbone_lr > 0.0;
  plan.backbone_lr = cfg.inc_backbone_lr;
  plan.head_lr = cfg.inc_lr;
  plan.repeat_prob = cfg.inc_repeat_prob;
  plan.ssl = cfg.ssl_enabled && cfg.ssl_all_sessions && cfg.ssl.gamma > 0.0;
  plan.session = session;
  detail::train_epochs(st, cfg, plan);

  Rng ex_rng(cfg.seed, Purpose::exemplar, session);
  for (int cls : spec.class_ids) {
    const LabeledImageSet imgs = spec.support.subset(spec.support.indices_of(cls));
    st.buffer.put(cls, imgs.size() <= cfg.replay_m ? imgs : exemplars_for_class(st.net, imgs, cfg.replay_m, ex_rng));
  }
  st.cumulative_query = concat(st.cumulative_query, spec.query);
  st.history.push_back(evaluate(st, st.cumulative_query, spec.index));
}

/// Checks that session class sets are pairwise disjoint.
inline void validate_sessions(const std::vector<SessionSpec>& specs) {
  std::set<int> seen;
  for (const auto& s : specs) {
    for (int c : s.class_ids) {
      if (!seen.insert(c).second) {
        throw ProtocolError("sessions are not class-disjoint: class " + std::to_string(c) + " repeats in session " +
                            std::to_string(s.index));
      }
    }
  }
}

}  // namespace fscil
