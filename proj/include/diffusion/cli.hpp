#pragma once

#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffusion/harness.hpp"

namespace diffusion {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDiverged = 2 };

namespace detail {

inline std::string fmt_db(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

inline std::string fmt_value(double v) {
  std::ostringstream ss;
  ss << std::setprecision(6) << v;
  return ss.str();
}

inline void print_summary(std::ostream& out, const ExperimentResult& r) {
  out << std::left << std::setw(16) << "strategy" << std::right << std::setw(12) << "msd_db" << std::setw(10)
      << "se_db" << std::setw(12) << "theory_db" << std::setw(10) << "stable" << std::setw(10) << "diverged"
      << '\n';
  for (const auto& s : r.strategies) {
    std::string stable = "-";
    if (s.theory) stable = s.theory->stable ? "yes" : "no";
    out << std::left << std::setw(16) << s.name << std::right << std::setw(12) << fmt_db(s.steady.msd_db)
        << std::setw(10) << fmt_db(s.steady.se_db) << std::setw(12)
        << (s.theory_msd ? fmt_db(to_db(*s.theory_msd)) : std::string("-")) << std::setw(10) << stable
        << std::setw(10) << (std::to_string(s.diverged) + "/" + std::to_string(r.n_trials)) << '\n';
  }
  if (r.bias) out << "bias ||w_true - w_hat||^2 = " << fmt_db(to_db(*r.bias)) << " dB\n";
  if (r.local_approximation) out << "note: theory is a local approximation (non-convex cost)\n";
}

inline void print_written(std::ostream& out, const std::vector<std::filesystem::path>& files) {
  for (const auto& f : files) out << "wrote " << f.string() << '\n';
}

}  // namespace detail

/// Entry point of the diffusion tool. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion adaptation experiments: simulation, sweeps, tracking and closed-form theory"};
  app.set_version_flag("--version", std::string("diffusion ") + kVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials;
  std::optional<std::string> out_dir;
  std::string param;
  std::vector<double> values;
  bool verbose = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "override run.seed");
    sub->add_option("--trials", trials, "override run.n_trials");
    sub->add_option("--out-dir", out_dir, "override output.dir");
    sub->add_flag("-v,--verbose", verbose, "print per-strategy notes");
  };
  auto* run_cmd = app.add_subcommand("run", "run a Monte Carlo experiment");
  auto* sweep_cmd = app.add_subcommand("sweep", "repeat an experiment over parameter values");
  auto* theory_cmd = app.add_subcommand("theory", "evaluate the closed-form steady-state analysis");
  auto* track_cmd = app.add_subcommand("track", "moving-target tracking experiment");
  for (auto* sub : {run_cmd, sweep_cmd, theory_cmd, track_cmd}) add_common(sub);
  sweep_cmd->add_option("--param", param, "mu, rho or epsilon")->required();
  sweep_cmd->add_option("--values", values, "parameter values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path);
    if (seed) cfg.run.seed = *seed;
    if (trials) {
      if (*trials == 0) throw ConfigError("--trials must be >= 1");
      cfg.run.n_trials = *trials;
    }
    if (out_dir) cfg.output.dir = *out_dir;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  auto notes = [&](const ExperimentResult& r) {
    if (!verbose) return;
    for (const auto& s : r.strategies)
      for (const auto& n : s.notes) out << s.name << ": " << n << '\n';
  };

  try {
    if (run_cmd->parsed() || track_cmd->parsed()) {
      if (track_cmd->parsed() && !cfg.run.trajectory) throw ConfigError("track needs run.target_trajectory");
      ExperimentResult r;
      std::vector<std::filesystem::path> files;
      if (track_cmd->parsed()) {
        TrackingResult t = tracking_experiment(cfg);
        r = std::move(t.experiment);
        files = write_experiment(cfg, r, "track");
        const auto p = artifact_path(cfg, "overlay.csv");
        auto os = open_artifact(p);
        write_overlay_csv(t.overlay, os);
        files.push_back(p);
      } else {
        r = run_experiment(cfg);
        files = write_experiment(cfg, r, "run");
      }
      detail::print_summary(out, r);
      notes(r);
      detail::print_written(out, files);
      return r.any_all_diverged() ? kExitDiverged : kExitOk;
    }

    if (sweep_cmd->parsed()) {
      const SweepTable t = sweep(cfg, param, values);
      const auto p = artifact_path(cfg, "sweep.csv");
      {
        auto os = open_artifact(p);
        write_sweep_csv(t, os);
      }
      out << std::left << std::setw(12) << param << std::setw(16) << "strategy" << std::right << std::setw(12)
          << "msd_db" << std::setw(12) << "theory_db" << '\n';
      for (const auto& row : t.rows)
        out << std::left << std::setw(12) << detail::fmt_value(row.value) << std::setw(16) << row.strategy << std::right
            << std::setw(12) << detail::fmt_db(row.msd_db) << std::setw(12)
            << (row.theory_msd_db ? detail::fmt_db(*row.theory_msd_db) : std::string("-")) << '\n';
      for (const auto& e : t.errors) err << "sweep: " << e << '\n';
      detail::print_written(out, {p});
      return t.any_all_diverged ? kExitDiverged : kExitOk;
    }

    // theory
    const Network net = build_network(cfg.network);
    const CostSet costs = build_costs(cfg.cost, net);
    std::vector<std::pair<std::string, theory::TheoryReport>> reports;
    Json doc;
    doc["version"] = kVersion;
    std::visit(
        [&](const auto& cv) {
          using C = typename std::decay_t<decltype(cv)>::value_type;
          const std::span<const C> cs(cv);
          Vector w_opt = (cfg.cost.model == "sparse" && cfg.cost.rho > 0.0) ? global_minimizer(cs)
                         : cfg.cost.model == "localization"                   ? Vector(cfg.cost.target)
                                                                              : cfg.cost.w_true;
          doc["linearisation_point"] = detail::to_json(w_opt);
          for (const auto& spec : cfg.strategies) {
            const Strategy s = build_strategy(spec, net);
            if (!s.has_theory()) {
              doc["skipped"].push_back(s.name);
              continue;
            }
            reports.emplace_back(s.name, theory::evaluate(theory::inputs_from_costs(cs, s.cm, w_opt)));
          }
        },
        costs);
    Json list = Json::array();
    for (const auto& [name, r] : reports) {
      Json j = theory_report_json(r);
      j["strategy"] = name;
      list.push_back(j);
    }
    doc["reports"] = list;
    const auto jp = artifact_path(cfg, "theory.json");
    const auto cp = artifact_path(cfg, "theory.csv");
    {
      auto os = open_artifact(jp);
      os << doc.dump(2) << '\n';
    }
    {
      auto os = open_artifact(cp);
      write_theory_csv(reports, os);
    }
    out << std::left << std::setw(16) << "strategy" << std::right << std::setw(12) << "theory_db" << std::setw(12)
        << "rho(B)" << std::setw(10) << "stable" << '\n';
    for (const auto& [name, r] : reports)
      out << std::left << std::setw(16) << name << std::right << std::setw(12)
          << (r.network_mse ? detail::fmt_db(to_db(*r.network_mse)) : std::string("-")) << std::setw(12)
          << std::setprecision(6) << r.b_spectral_radius << std::setw(10) << (r.stable ? "yes" : "no") << '\n';
    detail::print_written(out, {jp, cp});
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  }
}

}  // namespace diffusion
