/**
 * @file experiment.hpp
 * @brief Experiment orchestration behind the command-line tool: full runs,
 *        ablation grids, inference benchmarks, split materialization and
 *        report merging. Everything here writes into a run directory.
 */
#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fscil/checkpoint.hpp"
#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/protocol.hpp"

namespace fscil {

inline constexpr const char* kBuildVersion = "0.1.0";
inline constexpr const char* kOutRootEnv = "FSCIL_OUT_ROOT";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int numeric = 3;
}  // namespace exit_code

using Scalar = float;

// ---------------------------------------------------------------------------
// Paths and data

/// `out` if absolute, else `$FSCIL_OUT_ROOT/out` (or `./out` without the variable).
inline std::filesystem::path resolve_out_dir(const std::string& out) {
  std::filesystem::path p(out);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return std::filesystem::path(root) / p;
  return p;
}

struct Datasets {
  LabeledImageSet train;
  LabeledImageSet test;
};

inline Datasets load_datasets(const ExperimentConfig& cfg) {
  if (cfg.data_source == "synthetic") {
    const auto& s = cfg.synthetic;
    const SyntheticStyle style{s.noise, s.max_shift, s.random_pose, s.clutter};
    return {generate_synthetic(s.classes, s.train_per_class, s.side, s.seed, style, 1),
            generate_synthetic(s.classes, s.test_per_class, s.side, s.seed, style, 2)};
  }
  if (cfg.data_source == "cifar100") {
    return {load_cifar100_binary(cfg.train_path), load_cifar100_binary(cfg.test_path)};
  }
  return {load_raw_tensor_dataset(cfg.train_path), load_raw_tensor_dataset(cfg.test_path)};
}

inline std::vector<SessionSpec> make_sessions(const ExperimentConfig& cfg, const Datasets& data) {
  std::vector<SessionSpec> specs;
  if (!cfg.split_file.empty()) {
    std::ifstream in(cfg.split_file);
    if (!in) throw ConfigError("key 'split.file': cannot open " + cfg.split_file);
    std::stringstream ss;
    ss << in.rdbuf();
    specs = split_sessions_from_file(data.train, data.test, parse_split_file(ss.str()));
  } else {
    specs = split_sessions(data.train, data.test, cfg.split);
  }
  validate_sessions(specs);
  return specs;
}

// ---------------------------------------------------------------------------
// Metric CSV

inline constexpr const char* kMetricsHeader = "session,top1,base_acc,new_acc,harmonic_mean,mean_acc,pd_so_far";

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string opt_fixed(const std::optional<double>& v, int digits) { return v ? fixed(*v, digits) : ""; }

}  // namespace detail

/// One CSV row. `first_top1` is the session-0 accuracy used for the running PD.
inline std::string format_metrics_row(const MetricRecord& m, double first_top1) {
  std::string row = std::to_string(m.session) + "," + detail::fixed(m.top1, 6) + "," + detail::fixed(m.base_acc, 6) +
                    "," + detail::opt_fixed(m.new_acc, 6) + "," + detail::opt_fixed(m.harmonic_mean, 6) + "," +
                    detail::opt_fixed(m.mean_acc, 6) + ",";
  if (m.session > 0) row += detail::fixed((first_top1 - m.top1) * 100.0, 4);
  return row;
}

inline std::string format_metrics_csv(const std::vector<MetricRecord>& history) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& m : history) out += format_metrics_row(m, history.front().top1) + "\n";
  return out;
}

struct MetricsTable {
  std::vector<MetricRecord> rows;
};

inline MetricsTable parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kMetricsHeader) {
    throw FormatError("metrics csv: missing or unexpected header");
  }
  MetricsTable t;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 7) throw FormatError("metrics csv line " + std::to_string(lineno) + ": expected 7 fields");
    const auto num = [&](const std::string& s) { return std::stod(s); };
    const auto opt = [&](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    MetricRecord m;
    m.session = std::stoul(f[0]);
    m.top1 = num(f[1]);
    m.base_acc = num(f[2]);
    m.new_acc = opt(f[3]);
    m.harmonic_mean = opt(f[4]);
    m.mean_acc = opt(f[5]);
    t.rows.push_back(m);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
  std::vector<MetricRecord> history;
  std::filesystem::path dir;
  double final_top1() const { return history.back().top1; }
  double pd() const { return history.size() >= 2 ? performance_drop(history) : 0.0; }
};

inline std::string manifest_text(const ExperimentConfig& cfg, const std::string& status, std::size_t completed) {
  std::string s = "# fscil run manifest\n";
  s += "# build_version = " + std::string(kBuildVersion) + "\n";
  s += "# seed = " + std::to_string(cfg.protocol.seed) + "\n";
  s += "# status = " + status + "\n";
  s += "# sessions_completed = " + std::to_string(completed) + "\n";
  s += emit_config(cfg);
  return s;
}

/// Runs every session, writing manifest.txt, metrics.csv (one row appended per
/// session) and checkpoints/session_<t>.ckpt under `dir`.
inline RunResult run_experiment(const ExperimentConfig& cfg, const Datasets& data, const std::filesystem::path& dir,
                                std::ostream* log = nullptr) {
  validate(cfg);
  const auto specs = make_sessions(cfg, data);
  std::filesystem::create_directories(dir / "checkpoints");
  const auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    out << text;
  };
  write_text("manifest.txt", manifest_text(cfg, "running", 0));
  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  csv << kMetricsHeader << "\n" << std::flush;

  RunResult result;
  result.dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<SessionState<Scalar>> state;
  try {
    for (const auto& spec : specs) {
      if (spec.index == 0) {
        state.emplace(run_base_session<Scalar>(spec, cfg.protocol, cfg.net));
      } else {
        run_incremental_session(*state, spec, cfg.protocol);
      }
      const auto& rec = state->history.back();
      csv << format_metrics_row(rec, state->history.front().top1) << "\n" << std::flush;
      save_checkpoint(*state, dir / "checkpoints" / ("session_" + std::to_string(spec.index) + ".ckpt"));
      if (log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        *log << "session " << spec.index << ": top1 " << detail::fixed(rec.top1 * 100.0, 2) << "% ("
             << state->seen_classes.size() << " classes, " << detail::fixed(secs, 1) << "s)\n";
      }
    }
  } catch (const NumericError&) {
    write_text("manifest.txt", manifest_text(cfg, "numeric_error", state ? state->history.size() : 0));
    throw;
  }
  result.history = state->history;
  write_text("manifest.txt", manifest_text(cfg, "ok", result.history.size()));
  return result;
}

// ---------------------------------------------------------------------------
// Toggles and ablations

enum class Component { ens, ssl, da };

inline std::string to_string(Component c) {
  switch (c) {
    case Component::ens: return "ens";
    case Component::ssl: return "ssl";
    case Component::da: return "da";
  }
  return "?";
}

struct Toggle {
  Component component;
  std::optional<bool> value;  // nullopt: vary in an ablation grid
};

/// Parses `ens`, `ssl=on`, `da=off`, ...
inline Toggle parse_toggle(const std::string& text) {
  const auto eq = text.find('=');
  const std::string name = text.substr(0, eq);
  Toggle t{};
  if (name == "ens") t.component = Component::ens;
  else if (name == "ssl") t.component = Component::ssl;
  else if (name == "da") t.component = Component::da;
  else throw ConfigError("toggle: unknown component '" + name + "' (expected ens|ssl|da)");
  if (eq != std::string::npos) {
    const std::string v = text.substr(eq + 1);
    if (v == "on") t.value = true;
    else if (v == "off") t.value = false;
    else throw ConfigError("toggle: value for '" + name + "' must be on|off, got '" + v + "'");
  }
  return t;
}

inline void apply_toggle(ExperimentConfig& cfg, Component c, bool on) {
  switch (c) {
    case Component::ens: cfg.net.ensemble = on; break;
    case Component::ssl: cfg.protocol.ssl_enabled = on; break;
    case Component::da:
      if (!on) cfg.protocol.patchmix.mode = SamplingMode::off;
      else if (cfg.protocol.patchmix.mode == SamplingMode::off) cfg.protocol.patchmix.mode = SamplingMode::spatial;
      break;
  }
}

inline bool component_on(const ExperimentConfig& cfg, Component c) {
  switch (c) {
    case Component::ens: return cfg.net.ensemble;
    case Component::ssl: return cfg.protocol.ssl_enabled;
    case Component::da: return cfg.protocol.patchmix.mode != SamplingMode::off;
  }
  return false;
}

struct AblationCell {
  std::string name;
  bool ens = true, ssl = true, da = true;
};

inline std::string cell_name(bool ens, bool ssl, bool da) {
  const auto f = [](bool b) { return b ? "on" : "off"; };
  return std::string("ens-") + f(ens) + "_ssl-" + f(ssl) + "_da-" + f(da);
}

/// Full 2^k grid over the varied components; the rest keep their config value.
inline std::vector<AblationCell> ablation_grid(const ExperimentConfig& cfg, const std::vector<Component>& vary) {
  std::vector<AblationCell> cells;
  const std::size_t n = std::size_t{1} << vary.size();
  for (std::size_t mask = 0; mask < n; ++mask) {
    ExperimentConfig c = cfg;
    for (std::size_t k = 0; k < vary.size(); ++k) apply_toggle(c, vary[k], (mask >> k) & 1U);
    const bool e = component_on(c, Component::ens), s = component_on(c, Component::ssl),
               d = component_on(c, Component::da);
    cells.push_back({cell_name(e, s, d), e, s, d});
  }
  return cells;
}

/// Baseline, Ens, Ens+SSL, Ens+DA, Ens+SSL+DA.
inline std::vector<AblationCell> standard_cells() {
  std::vector<AblationCell> cells;
  for (auto [e, s, d] : {std::tuple{false, false, false}, std::tuple{true, false, false},
                         std::tuple{true, true, false}, std::tuple{true, false, true}, std::tuple{true, true, true}}) {
    cells.push_back({cell_name(e, s, d), e, s, d});
  }
  return cells;
}

inline ExperimentConfig configure_cell(const ExperimentConfig& base, const AblationCell& cell) {
  ExperimentConfig c = base;
  apply_toggle(c, Component::ens, cell.ens);
  apply_toggle(c, Component::ssl, cell.ssl);
  apply_toggle(c, Component::da, cell.da);
  return c;
}

struct CellSummary {
  AblationCell cell;
  std::vector<double> mean_top1;  // per session, averaged over seeds
  double final_top1 = 0.0;
  double pd = 0.0;
  std::size_t seeds = 0;
};

/// Runs each cell for `seeds` consecutive master seeds (split sampling shifted
/// alongside), writing <dir>/<cell>/seed<k>/ runs and <dir>/ablation.csv.
inline std::vector<CellSummary> run_ablation(const ExperimentConfig& cfg, const std::vector<AblationCell>& cells,
                                             std::size_t seeds, const std::filesystem::path& dir,
                                             std::ostream* log = nullptr) {
  if (seeds == 0) throw ConfigError("ablation: seeds must be >= 1");
  validate(cfg);
  const Datasets data = load_datasets(cfg);
  std::vector<CellSummary> out;
  for (const auto& cell : cells) {
    CellSummary sum;
    sum.cell = cell;
    sum.seeds = seeds;
    for (std::size_t k = 0; k < seeds; ++k) {
      ExperimentConfig c = configure_cell(cfg, cell);
      c.protocol.seed = cfg.protocol.seed + k;
      c.split.sample_seed = cfg.split.sample_seed + k;
      if (log) *log << "[" << cell.name << " seed " << c.protocol.seed << "]\n";
      const auto r = run_experiment(c, data, dir / cell.name / ("seed" + std::to_string(k)), log);
      if (sum.mean_top1.empty()) sum.mean_top1.assign(r.history.size(), 0.0);
      for (std::size_t t = 0; t < r.history.size(); ++t) {
        sum.mean_top1[t] += r.history[t].top1 * 100.0 / static_cast<double>(seeds);
      }
    }
    sum.final_top1 = sum.mean_top1.back();
    sum.pd = sum.mean_top1.size() >= 2 ? performance_drop_percent(sum.mean_top1) : 0.0;
    out.push_back(std::move(sum));
  }
  std::ofstream csv(dir / "ablation.csv", std::ios::binary);
  csv << "cell,ens,ssl,da,seeds";
  for (std::size_t t = 0; t < out.front().mean_top1.size(); ++t) csv << ",top1_s" << t;
  csv << ",final_top1,pd\n";
  for (const auto& s : out) {
    csv << s.cell.name << "," << s.cell.ens << "," << s.cell.ssl << "," << s.cell.da << "," << s.seeds;
    for (double v : s.mean_top1) csv << "," << detail::fixed(v, 2);
    csv << "," << detail::fixed(s.final_top1, 2) << "," << detail::fixed(s.pd, 2) << "\n";
  }
  return out;
}

inline std::string format_ablation_table(const std::vector<CellSummary>& cells) {
  std::ostringstream os;
  os << "Ens SSL DA |";
  for (std::size_t t = 0; t < cells.front().mean_top1.size(); ++t) os << "   s" << t << "  ";
  os << "|   PD\n";
  for (const auto& s : cells) {
    os << (s.cell.ens ? " x " : "   ") << " " << (s.cell.ssl ? " x " : "   ") << " " << (s.cell.da ? " x" : "  ")
       << " |";
    for (double v : s.mean_top1) os << " " << detail::fixed(v, 2) << " ";
    os << "| " << detail::fixed(s.pd, 2) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Inference benchmark

struct BenchReport {
  double ensemble_ms = 0.0;
  double single_ms = 0.0;
  double ratio = 0.0;
  std::size_t ensemble_params = 0;
  std::size_t single_params = 0;
  std::size_t branch_params = 0;
  double branch_fraction = 0.0;
  std::size_t reps = 0;
};

/// Mean wall-clock per batch for the two-branch net and its single-branch
/// view (c1, trunk, d1). Repetitions alternate between the two models.
template <typename T>
BenchReport bench_inference(const EnsembleNet<T>& net, const Tensor<T>& batch, std::size_t reps,
                            std::size_t warmup = 2) {
  if (reps < 10) throw std::invalid_argument("bench_inference: needs at least 10 repetitions");
  const EnsembleNet<T> single = net.single_branch_view();
  using clock = std::chrono::steady_clock;
  const auto time_one = [&](const EnsembleNet<T>& m) {
    const auto t0 = clock::now();
    const auto p = predict(m, batch);
    const auto t1 = clock::now();
    if (p.numel() == 0) throw std::logic_error("bench_inference: empty prediction");
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  for (std::size_t i = 0; i < warmup; ++i) {
    time_one(net);
    time_one(single);
  }
  BenchReport r;
  r.reps = reps;
  for (std::size_t i = 0; i < reps; ++i) {
    if (i % 2 == 0) {
      r.ensemble_ms += time_one(net);
      r.single_ms += time_one(single);
    } else {
      r.single_ms += time_one(single);
      r.ensemble_ms += time_one(net);
    }
  }
  r.ensemble_ms /= static_cast<double>(reps);
  r.single_ms /= static_cast<double>(reps);
  r.ratio = r.ensemble_ms / r.single_ms;
  r.ensemble_params = net.parameter_count();
  r.single_params = single.parameter_count();
  r.branch_params = net.branch_specific_parameter_count();
  r.branch_fraction = static_cast<double>(r.branch_params) / static_cast<double>(r.ensemble_params);
  return r;
}

inline std::string format_bench_report(const BenchReport& r) {
  std::ostringstream os;
  os << "repetitions          " << r.reps << "\n"
     << "two-branch ms/batch  " << detail::fixed(r.ensemble_ms, 3) << "\n"
     << "single ms/batch      " << detail::fixed(r.single_ms, 3) << "\n"
     << "time ratio           " << detail::fixed(r.ratio, 4) << "\n"
     << "params two-branch    " << r.ensemble_params << "\n"
     << "params single        " << r.single_params << "\n"
     << "branch-specific      " << r.branch_params << " (" << detail::fixed(100.0 * r.branch_fraction, 2)
     << "% of total)\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Report merging

struct ReportRow {
  std::string label;
  std::vector<double> top1_percent;
  double pd = 0.0;
};

inline ReportRow report_row(const std::string& label, const MetricsTable& t) {
  ReportRow r;
  r.label = label;
  for (const auto& m : t.rows) r.top1_percent.push_back(m.top1 * 100.0);
  if (r.top1_percent.size() >= 2) r.pd = performance_drop_percent(r.top1_percent);
  return r;
}

/// CSV with one row per run: label, top-1 (%) per session, PD.
inline std::string format_report(const std::vector<ReportRow>& rows) {
  std::size_t sessions = 0;
  for (const auto& r : rows) sessions = std::max(sessions, r.top1_percent.size());
  std::string out = "run";
  for (std::size_t t = 0; t < sessions; ++t) out += ",top1_s" + std::to_string(t);
  out += ",pd\n";
  for (const auto& r : rows) {
    out += r.label;
    for (std::size_t t = 0; t < sessions; ++t) {
      out += ",";
      if (t < r.top1_percent.size()) out += detail::fixed(r.top1_percent[t], 2);
    }
    out += "," + detail::fixed(r.pd, 2) + "\n";
  }
  return out;
}

}  // namespace fscil
