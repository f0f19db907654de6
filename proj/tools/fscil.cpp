// Command-line driver: run, ablate, bench-inference, split, report.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fscil/experiment.hpp"

namespace fs = std::filesystem;
using namespace fscil;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> toggles;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool config_required = true) {
  auto* c = cmd->add_option("--config", o.config, "experiment config file");
  if (config_required) c->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the master seed");
  cmd->add_option("--out", o.out, "output directory (relative paths resolve under $FSCIL_OUT_ROOT)");
}

ExperimentConfig resolve(const CommonOptions& o, bool fixed_toggles_only) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.protocol.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  for (const auto& t : o.toggles) {
    const Toggle tg = parse_toggle(t);
    if (tg.value) {
      apply_toggle(cfg, tg.component, *tg.value);
    } else if (fixed_toggles_only) {
      throw ConfigError("toggle '" + t + "' needs =on or =off for this command");
    }
  }
  validate(cfg);
  return cfg;
}

/// Maps exceptions onto the documented exit codes.
template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const PlanError& e) {
    std::cerr << "plan error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return exit_code::numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::failure;
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot class-incremental learning experiments"};
  app.require_subcommand(1);

  CommonOptions run_opt;
  auto* run = app.add_subcommand("run", "train and evaluate all sessions");
  add_common(run, run_opt);
  run->add_option("--toggle", run_opt.toggles, "ens|ssl|da=on|off");

  CommonOptions abl_opt;
  std::size_t seeds = 1;
  bool standard = false;
  auto* ablate = app.add_subcommand("ablate", "run a component ablation grid");
  add_common(ablate, abl_opt);
  ablate->add_option("--toggle", abl_opt.toggles, "component to vary (ens|ssl|da) or fix (name=on|off)");
  ablate->add_option("--seeds", seeds, "seeds per cell")->check(CLI::PositiveNumber);
  ablate->add_flag("--standard", standard, "run the 5-row subset: baseline, ens, ens+ssl, ens+da, all");

  CommonOptions bench_opt;
  std::string checkpoint;
  std::size_t reps = 20, batch = 64;
  auto* bench = app.add_subcommand("bench-inference", "time two-branch vs single-branch inference");
  add_common(bench, bench_opt);
  bench->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  bench->add_option("--reps", reps, "timed repetitions (>= 10)");
  bench->add_option("--batch", batch, "images per batch")->check(CLI::PositiveNumber);

  CommonOptions split_opt;
  auto* split = app.add_subcommand("split", "write the session split file for a config");
  add_common(split, split_opt);

  std::vector<std::string> csvs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "merge metric CSVs into one comparison table");
  report->add_option("csv", csvs, "metrics.csv files")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "write the table here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  if (*run) {
    return guarded([&] {
      const ExperimentConfig cfg = resolve(run_opt, true);
      const fs::path dir = resolve_out_dir(cfg.out_dir);
      const Datasets data = load_datasets(cfg);
      const RunResult r = run_experiment(cfg, data, dir, &std::cout);
      std::cout << "final top1 " << detail::fixed(r.final_top1() * 100.0, 2) << "%";
      if (r.history.size() >= 2) std::cout << ", PD " << detail::fixed(r.pd(), 2);
      std::cout << "\nwrote " << (dir / "metrics.csv").string() << "\n";
      return exit_code::ok;
    });
  }
  if (*ablate) {
    return guarded([&] {
      const ExperimentConfig cfg = resolve(abl_opt, false);
      std::vector<AblationCell> cells;
      if (standard) {
        cells = standard_cells();
      } else {
        std::vector<Component> vary;
        for (const auto& t : abl_opt.toggles) {
          const Toggle tg = parse_toggle(t);
          if (!tg.value) vary.push_back(tg.component);
        }
        cells = ablation_grid(cfg, vary);
      }
      const fs::path dir = resolve_out_dir(cfg.out_dir);
      fs::create_directories(dir);
      const auto summary = run_ablation(cfg, cells, seeds, dir, &std::cout);
      std::cout << "\n" << format_ablation_table(summary) << "wrote " << (dir / "ablation.csv").string() << "\n";
      return exit_code::ok;
    });
  }
  if (*bench) {
    return guarded([&] {
      const ExperimentConfig cfg = resolve(bench_opt, true);
      const auto ckpt = load_checkpoint<Scalar>(checkpoint);
      const Datasets data = load_datasets(cfg);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < std::min(batch, data.test.size()); ++i) idx.push_back(i);
      const auto report = bench_inference(ckpt.net, data.test.batch<Scalar>(idx), reps);
      std::cout << format_bench_report(report);
      return exit_code::ok;
    });
  }
  if (*split) {
    return guarded([&] {
      const ExperimentConfig cfg = resolve(split_opt, true);
      const Datasets data = load_datasets(cfg);
      const auto specs = make_sessions(cfg, data);
      const fs::path dir = resolve_out_dir(cfg.out_dir);
      fs::create_directories(dir);
      std::ofstream(dir / "split.txt", std::ios::binary) << format_split_file(specs);
      std::cout << "wrote " << (dir / "split.txt").string() << " (" << specs.size() << " sessions)\n";
      return exit_code::ok;
    });
  }
  if (*report) {
    return guarded([&] {
      std::vector<ReportRow> rows;
      for (const auto& c : csvs) {
        const fs::path p(c);
        const std::string label = p.has_parent_path() ? p.parent_path().string() : p.stem().string();
        rows.push_back(report_row(label, parse_metrics_csv(slurp(p))));
      }
      const std::string table = format_report(rows);
      if (report_out.empty()) {
        std::cout << table;
      } else {
        std::ofstream(resolve_out_dir(report_out), std::ios::binary) << table;
      }
      return exit_code::ok;
    });
  }
  return exit_code::failure;
}
