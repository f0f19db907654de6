// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if all pass.
//
//   acceptance [--only 1,5,9] [--out DIR]
//
// Criteria 5 and 6 write run directories under DIR (default: $FSCIL_OUT_ROOT/acceptance,
// or a temporary directory).

#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "fscil/experiment.hpp"
#include "fscil/grad_check.hpp"
#include "support.hpp"

using namespace fscil;
using fscil::testing::project;
using fscil::testing::random_tensor;
namespace fs = std::filesystem;
using D = double;

namespace {

const fs::path kConfigDir = FSCIL_CONFIG_DIR;
fs::path g_out;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradients

struct GradCase {
  std::string name;
  // Builds one random instance: the scalar function and the tensors to perturb.
  std::function<std::pair<ScalarFn<D>, std::vector<Tensor<D>>>(Rng&)> make;
};

std::size_t dim_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

std::vector<GradCase> grad_cases() {
  using Made = std::pair<ScalarFn<D>, std::vector<Tensor<D>>>;
  std::vector<GradCase> cs;
  const auto unary = [&](const std::string& name, auto op, bool positive = false) {
    cs.push_back({name, [op, positive](Rng& rng) -> Made {
                    const Shape s{dim_between(rng, 1, 4), dim_between(rng, 1, 5)};
                    auto x = random_tensor(s, rng);
                    if (positive) {
                      for (auto& v : x.values()) v = 0.3 + std::abs(v);
                    }
                    Tape<D> pt;
                    auto probe = random_tensor(op(pt, x).shape(), rng);
                    return {[=](Tape<D>& t) { return project(t, op(t, x), probe); }, {x}};
                  }});
  };
  cs.push_back({"conv2d", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 2), ci = dim_between(rng, 1, 3), co = dim_between(rng, 1, 3);
                  const std::size_t k = dim_between(rng, 1, 3), side = dim_between(rng, 3, 6);
                  const Conv2dAttrs attrs{dim_between(rng, 1, 2), dim_between(rng, 0, 1)};
                  auto x = random_tensor({n, ci, side, side}, rng);
                  auto w = random_tensor({co, ci, k, k}, rng);
                  auto b = random_tensor({co}, rng);
                  Tape<D> probe_tape;
                  const auto shape = conv2d(probe_tape, x, w, b, attrs).shape();
                  auto probe = random_tensor(shape, rng);
                  return {[=](Tape<D>& t) { return project(t, conv2d(t, x, w, b, attrs), probe); }, {x, w, b}};
                }});
  cs.push_back({"linear", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 4), i = dim_between(rng, 1, 5), o = dim_between(rng, 1, 4);
                  auto x = random_tensor({n, i}, rng), w = random_tensor({o, i}, rng), b = random_tensor({o}, rng);
                  auto probe = random_tensor({n, o}, rng);
                  return {[=](Tape<D>& t) { return project(t, linear(t, x, w, b), probe); }, {x, w, b}};
                }});
  cs.push_back({"matmul", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 4), k = dim_between(rng, 1, 4), m = dim_between(rng, 1, 4);
                  auto a = random_tensor({n, k}, rng), b = random_tensor({k, m}, rng);
                  auto probe = random_tensor({n, m}, rng);
                  return {[=](Tape<D>& t) { return project(t, matmul(t, a, b), probe); }, {a, b}};
                }});
  const auto spatial = [&](const std::string& name, auto op, std::size_t pool) {
    cs.push_back({name, [op, pool](Rng& rng) -> Made {
                    const std::size_t n = dim_between(rng, 1, 2), c = dim_between(rng, 1, 3);
                    const std::size_t side = pool * dim_between(rng, 1, 3);
                    auto x = random_tensor({n, c, side, side}, rng);
                    Tape<D> pt;
                    auto probe = random_tensor(op(pt, x).shape(), rng);
                    return {[=](Tape<D>& t) { return project(t, op(t, x), probe); }, {x}};
                  }});
  };
  spatial("relu", [](Tape<D>& t, const Tensor<D>& x) { return relu(t, x); }, 1);
  spatial("max_pool2d", [](Tape<D>& t, const Tensor<D>& x) { return max_pool2d(t, x, 2); }, 2);
  spatial("global_avg_pool", [](Tape<D>& t, const Tensor<D>& x) { return global_avg_pool(t, x); }, 1);
  const auto norm_case = [&](const std::string& name, int kind) {
    cs.push_back({name, [kind](Rng& rng) -> Made {
                    const std::size_t n = dim_between(rng, 2, 3), groups = dim_between(rng, 1, 2);
                    const std::size_t c = groups * dim_between(rng, 1, 2), side = dim_between(rng, 2, 4);
                    auto x = random_tensor({n, c, side, side}, rng);
                    auto g = random_tensor({c}, rng), b = random_tensor({c}, rng);
                    auto rm = random_tensor({c}, rng), rv = Tensor<D>::full({c}, 0.5 + rng.uniform());
                    auto probe = random_tensor(x.shape(), rng);
                    return {[=](Tape<D>& t) {
                              Tensor<D> y;
                              if (kind == 0) y = group_norm(t, x, g, b, groups);
                              if (kind == 1) y = batch_norm(t, x, g, b, Tensor<D>{}, Tensor<D>{}, true);
                              if (kind == 2) y = batch_norm(t, x, g, b, rm, rv, false);
                              return project(t, y, probe);
                            },
                            {x, g, b}};
                  }});
  };
  norm_case("group_norm", 0);
  norm_case("batch_norm (train)", 1);
  norm_case("batch_norm (eval)", 2);
  const auto binary = [&](const std::string& name, auto op) {
    cs.push_back({name, [op](Rng& rng) -> Made {
                    const Shape s{dim_between(rng, 1, 4), dim_between(rng, 1, 5)};
                    auto a = random_tensor(s, rng), b = random_tensor(s, rng), probe = random_tensor(s, rng);
                    return {[=](Tape<D>& t) { return project(t, op(t, a, b), probe); }, {a, b}};
                  }});
  };
  binary("add", [](Tape<D>& t, const Tensor<D>& a, const Tensor<D>& b) { return add(t, a, b); });
  binary("sub", [](Tape<D>& t, const Tensor<D>& a, const Tensor<D>& b) { return sub(t, a, b); });
  binary("mul", [](Tape<D>& t, const Tensor<D>& a, const Tensor<D>& b) { return mul(t, a, b); });
  unary("scale", [](Tape<D>& t, const Tensor<D>& x) { return scale(t, x, -1.7); });
  unary("add_scalar", [](Tape<D>& t, const Tensor<D>& x) { return add_scalar(t, x, 0.4); });
  unary("sqrt", [](Tape<D>& t, const Tensor<D>& x) { return sqrt(t, x); }, true);
  unary("l2_normalize", [](Tape<D>& t, const Tensor<D>& x) { return l2_normalize(t, x); });
  unary("sum", [](Tape<D>& t, const Tensor<D>& x) { return sum(t, x); });
  unary("mean", [](Tape<D>& t, const Tensor<D>& x) { return mean(t, x); });
  cs.push_back({"variance_per_dim", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 2, 5), d = dim_between(rng, 1, 4);
                  auto x = random_tensor({n, d}, rng), probe = random_tensor({d}, rng);
                  return {[=](Tape<D>& t) { return project(t, variance_per_dim(t, x), probe); }, {x}};
                }});
  cs.push_back({"covariance_matrix", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 2, 5), d = dim_between(rng, 1, 4);
                  auto x = random_tensor({n, d}, rng), probe = random_tensor({d, d}, rng);
                  return {[=](Tape<D>& t) { return project(t, covariance_matrix(t, x), probe); }, {x}};
                }});
  cs.push_back({"masked_blend", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 3), c = dim_between(rng, 1, 3), side = dim_between(rng, 2, 5);
                  auto a = random_tensor({n, c, side, side}, rng), b = random_tensor({n, c, side, side}, rng);
                  std::vector<MixMask> masks;
                  for (std::size_t i = 0; i < n; ++i) masks.push_back(make_cutmix_mask(side, side, {}, rng));
                  const auto m = stack_masks<D>(masks);
                  auto probe = random_tensor(a.shape(), rng);
                  return {[=](Tape<D>& t) { return project(t, mix_features(t, a, b, m), probe); }, {a, b}};
                }});
  cs.push_back({"softmax_cross_entropy", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 5), k = dim_between(rng, 2, 6);
                  auto logits = random_tensor({n, k}, rng, 2.0);
                  std::vector<int> y(n);
                  std::vector<D> w(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    y[i] = static_cast<int>(rng.index(k));
                    w[i] = 2.0 * rng.uniform();
                  }
                  return {[=](Tape<D>& t) { return softmax_cross_entropy<D>(t, logits, y, w); }, {logits}};
                }});
  cs.push_back({"cosine_logits", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 4), d = dim_between(rng, 2, 5), k = dim_between(rng, 1, 4);
                  auto f = random_tensor({n, d}, rng), h = random_tensor({k, d}, rng), probe = random_tensor({n, k}, rng);
                  return {[=](Tape<D>& t) { return project(t, cosine_logits(t, f, h, 16.0), probe); }, {f, h}};
                }});
  cs.push_back({"ensemble_loss", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 1, 5), k = dim_between(rng, 2, 6);
                  auto l1 = random_tensor({n, k}, rng, 2.0), l2 = random_tensor({n, k}, rng, 2.0);
                  std::vector<int> y1(n), y2(n);
                  std::vector<double> kappa(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    y1[i] = static_cast<int>(rng.index(k));
                    y2[i] = static_cast<int>(rng.index(k));
                    kappa[i] = rng.uniform();
                  }
                  const double r = std::vector<double>{1, 2, 3, 6}[rng.index(4)];
                  return {[=](Tape<D>& t) { return ensemble_loss<D>(t, l1, l2, y1, y2, kappa, r); }, {l1, l2}};
                }});
  cs.push_back({"ensemble_loss (through network)", [](Rng& rng) -> Made {
                  NetConfig nc;
                  nc.backbone.stage_channels = {2, 4};
                  auto net = std::make_shared<EnsembleNet<D>>(nc, 3, rng);
                  const std::size_t n = dim_between(rng, 2, 3);
                  auto x1 = random_tensor({n, 3, 4, 4}, rng), x2 = random_tensor({n, 3, 4, 4}, rng);
                  std::vector<MixMask> masks;
                  std::vector<double> kappa;
                  std::vector<int> y1(n), y2(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    masks.push_back(make_cutmix_mask(4, 4, {}, rng));
                    kappa.push_back(masks.back().kappa_eff);
                    y1[i] = static_cast<int>(rng.index(3));
                    y2[i] = static_cast<int>(rng.index(3));
                  }
                  const auto m = stack_masks<D>(masks);
                  return {[=](Tape<D>& t) {
                            const auto o = forward_train(t, *net, x1, x2, m);
                            return ensemble_loss<D>(t, o.logits1, o.logits2, y1, y2, kappa, 3.0);
                          },
                          net->parameters()};
                }});
  cs.push_back({"ssl_loss", [](Rng& rng) -> Made {
                  const std::size_t n = dim_between(rng, 2, 6), d = dim_between(rng, 1, 5);
                  auto z = random_tensor({n, d}, rng, 0.2 + rng.uniform()), z2 = random_tensor({n, d}, rng, 0.5);
                  SslParams p;
                  p.gamma = 0.2;
                  return {[=](Tape<D>& t) { return ssl_loss(t, z, z2, p); }, {z, z2}};
                }});
  return cs;
}

Outcome criterion_gradients() {
  constexpr int kInstances = 20;
  double worst = 0.0;
  std::string worst_name, failures;
  std::size_t checks = 0;
  Rng rng(20240601);
  for (const auto& c : grad_cases()) {
    double case_worst = 0.0;
    for (int i = 0; i < kInstances; ++i) {
      auto [f, params] = c.make(rng);
      case_worst = std::max(case_worst, grad_check<D>(f, params, 1e-6));
      ++checks;
    }
    if (case_worst >= 1e-4) failures += " " + c.name;
    if (case_worst > worst) {
      worst = case_worst;
      worst_name = c.name;
    }
  }
  return {failures.empty(), std::to_string(grad_cases().size()) + " ops x " + std::to_string(kInstances) +
                                " instances, max rel err " + fmt("%.2e", worst) + " (" + worst_name + ")" +
                                (failures.empty() ? "" : "; over 1e-4:" + failures)};
}

// ---------------------------------------------------------------------------
// 2. Mixing algebra

Outcome criterion_algebra() {
  Rng rng(2);
  std::size_t mix_bad = 0;
  Tape<D> tape;
  for (int i = 0; i < 100; ++i) {
    const std::size_t h = dim_between(rng, 1, 8), w = dim_between(rng, 1, 8);
    auto l = random_tensor({2, 3, h, w}, rng);
    const auto y = mix_features(tape, l, l, make_cutmix_mask(h, w, {}, rng));
    for (std::size_t j = 0; j < l.numel(); ++j) mix_bad += y[j] != 2.0 * l[j];
  }
  double worst = 0.0;
  for (double r : {1.0, 2.0, 3.0, 6.0}) {
    for (int i = 0; i < 1000; ++i) {
      const double k = static_cast<double>(i) / 999.0;
      worst = std::max(worst, std::abs(weight_fn(k, r) + weight_fn(1.0 - k, r) - 2.0));
    }
  }
  bool half = true;
  for (double r : {1.0, 2.0, 3.0, 6.0}) half = half && weight_fn(0.5, r) == 1.0;
  return {mix_bad == 0 && worst <= 1e-12 && half,
          "mix(l,l,m)=2l mismatches " + std::to_string(mix_bad) + "/100 masks; max |w(k)+w(1-k)-2| " +
              fmt("%.1e", worst) + " on 1000-pt grid, r in {1,2,3,6}; w(0.5)=1 " + (half ? "exact" : "NOT exact")};
}

// ---------------------------------------------------------------------------
// 3. Bowl sampler

Outcome criterion_bowl() {
  const auto g = bowl_weights(3, 0.5);
  double pattern_err = std::abs(g.weight(1, 1));
  for (auto [r, c] : {std::pair{0, 1}, {1, 0}, {1, 2}, {2, 1}}) pattern_err = std::max(pattern_err, std::abs(g.weight(r, c) - 1.0 / 12.0));
  for (auto [r, c] : {std::pair{0, 0}, {0, 2}, {2, 0}, {2, 2}}) pattern_err = std::max(pattern_err, std::abs(g.weight(r, c) - 1.0 / 6.0));

  Rng rng(3);
  std::size_t centre_hits = 0;
  for (std::size_t n : {3u, 5u, 7u}) {
    const auto grid = bowl_weights(n, 0.5);
    const std::size_t centre = (n / 2) * n + n / 2;
    for (int t = 0; t < 100000; ++t) centre_hits += sample_patches(grid, 1, 1, rng)[0] == centre;
  }
  std::vector<double> counts(9, 0.0);
  for (int t = 0; t < 100000; ++t) counts[sample_patches(g, 1, 1, rng)[0]] += 1.0;
  double stat = 0.0;
  for (std::size_t c = 0; c < 9; ++c) {
    if (c == 4) continue;
    const double e = 100000.0 * g.cell_weights[c];
    stat += (counts[c] - e) * (counts[c] - e) / e;
  }
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(7.0), stat));
  return {pattern_err <= 1e-12 && centre_hits == 0 && p > 0.01,
          "n=3 pattern err " + fmt("%.1e", pattern_err) + "; centre hits " + std::to_string(centre_hits) +
              " in 1e5 draws each for n=3,5,7; chi2(7) = " + fmt("%.2f", stat) + ", p = " + fmt("%.3f", p)};
}

// ---------------------------------------------------------------------------
// 4. SSL identities

Outcome criterion_ssl() {
  Rng rng(4);
  EnsembleNet<D> net(NetConfig{}, 5, rng);
  auto x1 = random_tensor({6, 3, 8, 8}, rng), x2 = random_tensor({6, 3, 8, 8}, rng);
  std::vector<MixMask> masks;
  for (int i = 0; i < 6; ++i) masks.push_back(make_cutmix_mask(8, 8, {}, rng));
  bool inv_zero = true;
  for (auto t : kAllTransforms) {
    const std::vector<ViewTransform> ts{t};
    Tape<D> tape;
    const auto v = build_views(tape, net, x1, x2, masks, ts, ts);
    inv_zero = inv_zero && invariance_term(tape, v.view1.pooled, v.view2.pooled).item() == 0.0;
  }
  // Hadamard columns: zero mean, unit population std, uncorrelated.
  const auto z = Tensor<D>::from({4, 3}, {1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
  Tape<D> tape;
  const double loss = ssl_loss(tape, z, z, SslParams{}).item();
  const std::vector<D> v{0.5, -1.0, 2.0, 0.25, -0.75, 1.5};
  double mu = 0.0, var = 0.0;
  for (D x : v) mu += x / 6.0;
  for (D x : v) var += (x - mu) * (x - mu) / 5.0;
  std::vector<D> dup;
  for (D x : v) dup.insert(dup.end(), {x, x});
  const double cov = covariance_term(tape, Tensor<D>::from({6, 2}, dup)).item();
  const bool cov_ok = std::abs(cov - var * var) <= 1e-12;
  return {inv_zero && std::abs(loss) <= 1e-3 && cov_ok,
          std::string("t=t' invariance ") + (inv_zero ? "bitwise 0" : "NONZERO") + " for all 6 transforms; " +
              "ssl_loss on unit-std uncorrelated equal views " + fmt("%.2e", loss) + "; duplicated-dim cov " +
              fmt("%.6f", cov) + " vs v^2 " + fmt("%.6f", var * var)};
}

// ---------------------------------------------------------------------------
// 5. Protocol

std::vector<std::uint8_t> backbone_bytes(const EnsembleNet<D>& net) {
  std::vector<std::uint8_t> out;
  const auto append = [&](const Tensor<D>& t) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values().data());
    out.insert(out.end(), p, p + t.numel() * sizeof(D));
  };
  for (const auto& p : net.backbone_parameters()) append(p);
  for (const auto& b : net.named_buffers()) append(b.tensor);
  return out;
}

struct ProtocolTrace {
  std::vector<std::size_t> classes, buffers;
  bool frozen = true;
};

ProtocolTrace trace_protocol(const ExperimentConfig& cfg) {
  const Datasets data = load_datasets(cfg);
  const auto specs = make_sessions(cfg, data);
  ProtocolTrace tr;
  auto st = run_base_session<D>(specs[0], cfg.protocol, cfg.net);
  tr.classes.push_back(st.seen_classes.size());
  tr.buffers.push_back(st.buffer.size());
  for (std::size_t s = 1; s < specs.size(); ++s) {
    const auto before = backbone_bytes(st.net);
    run_incremental_session(st, specs[s], cfg.protocol);
    tr.frozen = tr.frozen && backbone_bytes(st.net) == before;
    tr.classes.push_back(st.seen_classes.size());
    tr.buffers.push_back(st.buffer.size());
  }
  return tr;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (auto x : v) s += (s.empty() ? "" : "/") + std::to_string(x);
  return s;
}

Outcome criterion_protocol() {
  const ExperimentConfig cfg = load_config(kConfigDir / "protocol.cfg");
  const auto two_shot = trace_protocol(cfg);
  // Each class stores min(m, available) exemplars, so 2-shot sessions add 2 per class;
  // with 5 shots the buffer reaches m per class.
  ExperimentConfig five = cfg;
  five.split.shot = 5;
  const auto five_shot = trace_protocol(five);
  const std::vector<std::size_t> want_classes{6, 8, 10}, want_two{30, 34, 38}, want_five{30, 40, 50};

  const Datasets data = load_datasets(cfg);
  const fs::path a = g_out / "protocol" / "run_a", b = g_out / "protocol" / "run_b";
  run_experiment(cfg, data, a);
  run_experiment(cfg, data, b);
  const std::string csv_a = slurp(a / "metrics.csv"), csv_b = slurp(b / "metrics.csv");
  const bool same = !csv_a.empty() && csv_a == csv_b;

  const bool ok = two_shot.classes == want_classes && five_shot.classes == want_classes &&
                  two_shot.buffers == want_two && five_shot.buffers == want_five && two_shot.frozen &&
                  five_shot.frozen && same;
  return {ok, "classes " + join(two_shot.classes) + "; buffer (m=5) 2-shot " + join(two_shot.buffers) +
                  ", 5-shot " + join(five_shot.buffers) + "; frozen backbone bytes " +
                  (two_shot.frozen && five_shot.frozen ? "unchanged" : "CHANGED") + "; metrics.csv " +
                  (same ? "bitwise identical" : "DIFFERS") + " across two runs"};
}

// ---------------------------------------------------------------------------
// 6. Directional ablation

Outcome criterion_ablation() {
  const ExperimentConfig cfg = load_config(kConfigDir / "desk.cfg");
  const std::vector<AblationCell> cells{
      {"baseline", false, false, false}, {"ens", true, false, false}, {"ens+ssl+da", true, true, true}};
  const auto s = run_ablation(cfg, cells, 5, g_out / "ablation", nullptr);
  const double base = s[0].final_top1, ens = s[1].final_top1, full = s[2].final_top1;
  const bool order = full >= ens && ens >= base;
  const bool margin = ens - base > 2.0;
  const bool pd = s[2].pd <= s[0].pd;
  std::string d = "final top-1 over 5 seeds: baseline " + fmt("%.2f", base) + ", ens " + fmt("%.2f", ens) +
                  ", ens+ssl+da " + fmt("%.2f", full) + "; ens-baseline margin " + fmt("%.2f", ens - base) +
                  "pp; PD full " + fmt("%.2f", s[2].pd) + " vs baseline " + fmt("%.2f", s[0].pd);
  if (!order) d += " [ordering violated]";
  if (!margin) d += " [margin <= 2pp]";
  if (!pd) d += " [PD larger than baseline]";
  return {order && margin && pd, d};
}

// ---------------------------------------------------------------------------
// 7. Overfitting probe

struct Gap {
  double train = 0.0, test = 0.0;
  double gap() const { return 100.0 * (train - test); }
};

Gap probe_gap(const ExperimentConfig& cfg, const Datasets& data, bool ensemble, bool few_shot, std::uint64_t seed) {
  constexpr int kWay = 10;
  constexpr std::size_t kShot = 5;
  SessionSpec spec;
  spec.index = 0;
  Rng pick(seed, Purpose::sampling, 4242);
  std::vector<std::size_t> train_idx, test_idx;
  for (int c = 0; c < kWay; ++c) {
    spec.class_ids.push_back(c);
    auto idx = data.train.indices_of(c);
    if (few_shot) {
      const auto perm = pick.permutation(idx.size());
      std::vector<std::size_t> chosen;
      for (std::size_t k = 0; k < kShot; ++k) chosen.push_back(idx[perm[k]]);
      idx = chosen;
    }
    train_idx.insert(train_idx.end(), idx.begin(), idx.end());
    const auto t = data.test.indices_of(c);
    test_idx.insert(test_idx.end(), t.begin(), t.end());
  }
  spec.support = data.train.subset(train_idx);
  spec.query = data.test.subset(test_idx);

  ProtocolConfig pc = cfg.protocol;
  pc.seed = seed;
  pc.ssl_enabled = false;
  pc.patchmix.mode = SamplingMode::off;
  // Equal optimizer-step budgets: the few-shot run gets proportionally more epochs.
  const std::size_t full_n = kWay * cfg.synthetic.train_per_class;
  if (few_shot) pc.base_epochs = pc.base_epochs * full_n / (kWay * kShot);
  NetConfig nc = cfg.net;
  nc.ensemble = ensemble;
  const auto st = run_base_session<D>(spec, pc, nc);
  const auto [tr, te] = overfit_gap_probe(st, spec.support, spec.query);
  return {tr, te};
}

Outcome criterion_overfit() {
  const ExperimentConfig cfg = load_config(kConfigDir / "desk.cfg");
  const Datasets data = load_datasets(cfg);
  constexpr int kSeeds = 3;
  double gap[2][2] = {};  // [ensemble][few_shot]
  for (int e = 0; e < 2; ++e) {
    for (int f = 0; f < 2; ++f) {
      for (int s = 0; s < kSeeds; ++s) {
        gap[e][f] += probe_gap(cfg, data, e == 1, f == 1, cfg.protocol.seed + static_cast<std::uint64_t>(s)).gap() /
                     kSeeds;
      }
    }
  }
  const bool base_ok = gap[0][1] - gap[0][0] >= 15.0;
  const bool ens_ok = gap[1][1] - gap[1][0] >= 15.0;
  const bool smaller = gap[1][1] < gap[0][1];
  return {base_ok && ens_ok && smaller,
          "train-test gap (pp, mean of 3 seeds): baseline few-shot " + fmt("%.2f", gap[0][1]) + " vs full " +
              fmt("%.2f", gap[0][0]) + "; ensemble few-shot " + fmt("%.2f", gap[1][1]) + " vs full " +
              fmt("%.2f", gap[1][0])};
}

// ---------------------------------------------------------------------------
// 8. PD arithmetic

Outcome criterion_pd() {
  const std::vector<double> cifar{81.28, 74.29, 70.07, 66.51, 63.80, 61.40, 57.99, 57.04, 56.53};
  const std::vector<double> mini{76.60, 71.57, 66.89, 62.63, 60.22, 57.48, 55.22, 53.16, 50.89};
  const double a = performance_drop_percent(cifar), b = performance_drop_percent(mini);
  const bool ok = fmt("%.2f", a) == "24.75" && fmt("%.2f", b) == "25.71" && std::abs(a - 24.75) < 1e-9 &&
                  std::abs(b - 25.71) < 1e-9;
  return {ok, "CIFAR-100 row " + fmt("%.2f", a) + " (expected 24.75), miniImageNet row " + fmt("%.2f", b) +
                  " (expected 25.71)"};
}

// ---------------------------------------------------------------------------
// 9. Inference parity

Outcome criterion_inference() {
  const ExperimentConfig cfg = load_config(kConfigDir / "desk.cfg");
  Rng rng(9);
  EnsembleNet<D> net(cfg.net, cfg.synthetic.classes, rng);
  const auto data = load_datasets(cfg);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min<std::size_t>(64, data.test.size()); ++i) idx.push_back(i);
  const auto r = bench_inference(net, data.test.batch<D>(idx), 40);
  return {r.ratio < 1.15 && r.branch_fraction < 0.05,
          "time ratio " + fmt("%.4f", r.ratio) + " (" + fmt("%.3f", r.ensemble_ms) + " vs " +
              fmt("%.3f", r.single_ms) + " ms/batch); branch-specific params " + std::to_string(r.branch_params) +
              "/" + std::to_string(r.ensemble_params) + " = " + fmt("%.2f", 100.0 * r.branch_fraction) + "%"};
}

// ---------------------------------------------------------------------------
// 10. CIFAR loader

Outcome criterion_cifar() {
  std::vector<std::uint8_t> bytes;
  for (std::size_t r = 0; r < 3; ++r) {
    bytes.push_back(static_cast<std::uint8_t>(r));
    bytes.push_back(static_cast<std::uint8_t>(40 + r));
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>((i * 13 + r * 101) % 256));
  }
  const fs::path dir = g_out / "cifar";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "fixture.bin", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                               static_cast<std::streamsize>(bytes.size()));
  }
  const auto set = load_cifar100_binary(dir / "fixture.bin");
  save_cifar100_binary(set, dir / "roundtrip.bin");
  const auto back = slurp(dir / "roundtrip.bin");
  const bool round = back.size() == bytes.size() && std::memcmp(back.data(), bytes.data(), bytes.size()) == 0 &&
                     set.size() == 3 && set.labels == std::vector<int>{40, 41, 42};
  std::string msg;
  {
    std::ofstream(dir / "truncated.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(2 * 3074 + 500));
  }
  try {
    load_cifar100_binary(dir / "truncated.bin");
  } catch (const FormatError& e) {
    msg = e.what();
  }
  const bool offset = msg.find("byte offset 6148") != std::string::npos;
  return {round && offset, std::string("3-record fixture ") + (round ? "round-trips bitwise" : "DOES NOT round-trip") +
                               "; truncated file error: \"" + (msg.empty() ? "none" : msg) + "\""};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--out DIR]\n";
      return 2;
    }
  }
  if (g_out.empty()) {
    const char* root = std::getenv(kOutRootEnv);
    g_out = root && *root ? fs::path(root) / "acceptance" : fs::temp_directory_path() / "fscil_acceptance";
  }
  fs::create_directories(g_out);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", criterion_gradients},   {"mixing algebra", criterion_algebra},
      {"bowl sampler", criterion_bowl},          {"SSL identities", criterion_ssl},
      {"protocol", criterion_protocol},          {"directional ablation", criterion_ablation},
      {"overfitting probe", criterion_overfit}, {"PD arithmetic", criterion_pd},
      {"inference parity", criterion_inference}, {"CIFAR-100 loader", criterion_cifar}};

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": " << o.detail << " ("
              << fmt("%.1f", secs) << " s)" << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
