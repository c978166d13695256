#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "diffusion/config.hpp"
#include "diffusion/theory.hpp"

#ifndef DIFFUSION_VERSION
#define DIFFUSION_VERSION "0.1.0"
#endif

namespace diffusion {

inline constexpr const char* kVersion = DIFFUSION_VERSION;

struct SteadyStateEstimate {
  double msd = 0.0;  // linear
  double msd_db = kDbFloor;
  double se = 0.0;  // standard error of msd across trials
  double se_db = 0.0;
  double tail_fraction = 0.2;
};

struct StrategyResult {
  std::string name;
  StrategyKind kind = StrategyKind::atc;
  Vector curve;                   // network MSD, linear, entry j is iteration j + 1
  Matrix node_curve;              // horizon x N, linear; empty unless per_node
  SteadyStateEstimate steady;
  Vector node_tail;               // per-node tail MSE averaged over trials
  std::vector<double> trial_tail; // network tail MSD of each surviving trial
  std::size_t trials_used = 0;
  std::size_t diverged = 0;
  Matrix tracked;                 // trial 0 estimate of the tracked node, rows i = 0..horizon
  std::optional<theory::TheoryReport> theory;
  std::optional<double> theory_msd;  // includes the bias term when measured against w_true
  std::vector<std::string> notes;

  std::vector<double> curve_db() const {
    std::vector<double> out(static_cast<std::size_t>(curve.size()));
    for (Eigen::Index i = 0; i < curve.size(); ++i) out[static_cast<std::size_t>(i)] = to_db(curve[i]);
    return out;
  }
};

struct ExperimentResult {
  std::vector<StrategyResult> strategies;
  Network network;
  Vector reference;  // static reference (initial target for moving scenarios)
  std::optional<double> bias;  // ||w_true - minimizer||^2 when a minimizer was solved for
  std::size_t horizon = 0;
  std::size_t n_trials = 0;
  std::uint64_t seed = 0;
  bool per_node = false;
  bool local_approximation = false;

  bool any_all_diverged() const {
    return std::any_of(strategies.begin(), strategies.end(),
                       [](const StrategyResult& s) { return s.trials_used == 0; });
  }
  const StrategyResult& at(const std::string& name) const {
    for (const auto& s : strategies)
      if (s.name == name) return s;
    throw ConfigError("no strategy named '" + name + "'");
  }
};

/// Steady-state estimate from per-trial tail averages.
inline SteadyStateEstimate steady_state_from_trials(const std::vector<double>& tails, double tail_fraction) {
  SteadyStateEstimate e;
  e.tail_fraction = tail_fraction;
  if (tails.empty()) {
    e.msd = std::numeric_limits<double>::quiet_NaN();
    e.msd_db = e.msd;
    return e;
  }
  const double t = static_cast<double>(tails.size());
  double mean = 0.0;
  for (double v : tails) mean += v;
  mean /= t;
  double var = 0.0;
  for (double v : tails) var += (v - mean) * (v - mean);
  var = tails.size() > 1 ? var / (t - 1.0) : 0.0;
  e.msd = mean;
  e.msd_db = to_db(mean);
  e.se = std::sqrt(var / t);
  e.se_db = mean > 0.0 ? 10.0 / std::log(10.0) * e.se / mean : 0.0;
  return e;
}

inline std::size_t tail_length(std::size_t horizon, double tail_fraction) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(horizon))));
}

namespace detail {

struct TrialRecord {
  std::vector<Trajectory> runs;
};

template <class F>
void parallel_for(std::size_t count, std::size_t workers, F&& body) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, count);
  std::vector<std::exception_ptr> errors(count);
  auto work = [&](std::atomic<std::size_t>& next) {
    for (std::size_t t = next++; t < count; t = next++) {
      try {
        body(t);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  std::atomic<std::size_t> next{0};
  if (workers <= 1) {
    work(next);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back([&] { work(next); });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <CostModel C>
Vector static_reference(const ExperimentConfig& cfg, std::span<const C> costs) {
  if (cfg.run.trajectory) return cfg.run.trajectory->at(0);
  if (cfg.run.reference == "global_minimizer") return global_minimizer(costs);
  if (cfg.cost.model == "localization") return cfg.cost.target;
  return cfg.cost.w_true;
}

template <CostModel C>
void attach_theory(const ExperimentConfig& cfg, std::span<const C> costs, const std::vector<Strategy>& strategies,
                   ExperimentResult& result) {
  // Linearisation point: the minimizer of the aggregate cost.
  Vector w_opt;
  try {
    if (cfg.cost.model == "sparse" && cfg.cost.rho > 0.0) {
      w_opt = global_minimizer(costs);
      if (cfg.run.reference == "model_w_true") result.bias = (cfg.cost.w_true - w_opt).squaredNorm();
    } else {
      w_opt = cfg.cost.model == "localization" ? Vector(cfg.cost.target) : cfg.cost.w_true;
      if (cfg.cost.model == "sparse" && cfg.run.reference == "model_w_true") result.bias = 0.0;
    }
  } catch (const Error& e) {
    for (auto& s : result.strategies) s.notes.emplace_back(std::string("theory skipped: ") + e.what());
    return;
  }
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    auto& out = result.strategies[s];
    if (!strategies[s].has_theory()) continue;
    try {
      auto report = theory::evaluate(theory::inputs_from_costs(costs, strategies[s].cm, w_opt));
      if (report.network_mse) out.theory_msd = *report.network_mse + result.bias.value_or(0.0);
      result.local_approximation = result.local_approximation || report.local_approximation;
      out.theory = std::move(report);
    } catch (const Error& e) {
      out.notes.emplace_back(std::string("theory skipped: ") + e.what());
    }
  }
}

template <CostModel C>
ExperimentResult run_with_costs(const ExperimentConfig& cfg, const Network& net, const std::vector<C>& cost_vec) {
  const std::span<const C> costs(cost_vec);
  const std::size_t n = net.size();
  const std::size_t m = costs.front().dim();
  const std::size_t horizon = cfg.run.horizon;

  std::vector<Strategy> strategies;
  for (const auto& spec : cfg.strategies) strategies.push_back(build_strategy(spec, net));

  ExperimentResult result;
  result.network = net;
  result.horizon = horizon;
  result.n_trials = cfg.run.n_trials;
  result.seed = cfg.run.seed;
  result.per_node = cfg.run.per_node;
  result.reference = static_reference(cfg, costs);
  if (static_cast<std::size_t>(result.reference.size()) != m) throw ConfigError("reference/target dimension mismatch");
  if (cfg.run.init && static_cast<std::size_t>(cfg.run.init->size()) != m)
    throw ConfigError("run.init has the wrong dimension");
  if (cfg.run.track_node >= n) throw ConfigError("run.track_node out of range");

  RunOptions options;
  options.horizon = horizon;
  options.exact = cfg.run.exact_gradients;
  options.init = cfg.run.init;
  options.reference = result.reference;
  if (cfg.run.trajectory) {
    const auto traj = *cfg.run.trajectory;
    options.moving_target = [traj](std::size_t i) { return traj.at(i); };
    options.track_node = cfg.run.track_node;
  }

  std::vector<TrialRecord> trials(cfg.run.n_trials);
  parallel_for(cfg.run.n_trials, cfg.run.workers, [&](std::size_t t) {
    auto streams = trial_streams(cfg.run.seed, t, n);
    RunOptions opt = options;
    if (t != 0) opt.track_node.reset();
    trials[t].runs = run_lockstep(std::span<const Strategy>(strategies), costs, std::span<Rng>(streams), opt);
  });

  // Deterministic reduction in trial order.
  const auto h = static_cast<Eigen::Index>(horizon);
  const auto nn = static_cast<Eigen::Index>(n);
  const std::size_t tail = tail_length(horizon, cfg.run.tail_fraction);
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    StrategyResult r;
    r.name = strategies[s].name;
    r.kind = strategies[s].kind;
    r.curve = Vector::Zero(h);
    r.node_tail = Vector::Zero(nn);
    if (cfg.run.per_node) r.node_curve = Matrix::Zero(h, nn);
    for (std::size_t t = 0; t < trials.size(); ++t) {
      const Trajectory& tr = trials[t].runs[s];
      if (t == 0) r.tracked = tr.tracked_estimate;
      if (tr.diverged_at) {
        ++r.diverged;
        continue;
      }
      ++r.trials_used;
      const auto body = tr.squared_error.bottomRows(h);
      const Vector net_curve = body.rowwise().mean();
      r.curve += net_curve;
      if (cfg.run.per_node) r.node_curve += body;
      const auto tail_rows = static_cast<Eigen::Index>(tail);
      r.trial_tail.push_back(net_curve.tail(tail_rows).mean());
      r.node_tail += body.bottomRows(tail_rows).colwise().mean().transpose();
    }
    if (r.trials_used > 0) {
      const double used = static_cast<double>(r.trials_used);
      r.curve /= used;
      r.node_tail /= used;
      if (cfg.run.per_node) r.node_curve /= used;
    } else {
      r.curve.setConstant(std::numeric_limits<double>::quiet_NaN());
      r.node_tail.setConstant(std::numeric_limits<double>::quiet_NaN());
      if (cfg.run.per_node) r.node_curve.setConstant(std::numeric_limits<double>::quiet_NaN());
      r.notes.emplace_back("all trials diverged");
    }
    r.steady = steady_state_from_trials(r.trial_tail, cfg.run.tail_fraction);
    result.strategies.push_back(std::move(r));
  }

  if (cfg.cost.model == "localization") result.local_approximation = true;
  if (cfg.run.theory && !cfg.run.trajectory) attach_theory(cfg, costs, strategies, result);
  return result;
}

}  // namespace detail

/// Runs every configured strategy over n_trials paired trials.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const Network net = build_network(cfg.network);
  const CostSet costs = build_costs(cfg.cost, net);
  return std::visit([&](const auto& c) { return detail::run_with_costs(cfg, net, c); }, costs);
}

// ---------------------------------------------------------------------------
// Bias decomposition for the regularised model: MSD vs w_true splits into
// ||w_true - w_hat||^2 plus MSD vs the minimizer w_hat, the cross term
// vanishing in expectation.

struct BiasDecomposition {
  std::string strategy;
  double bias = 0.0;
  SteadyStateEstimate total;         // vs w_true
  SteadyStateEstimate vs_minimizer;  // vs w_hat
  double residual = 0.0;             // mean over trials of total - bias - vs_minimizer
  double residual_se = 0.0;
  std::optional<double> theory_vs_minimizer;
};

inline std::vector<BiasDecomposition> biased_reference_msd(ExperimentConfig cfg) {
  if (cfg.cost.model != "sparse") throw ConfigError("bias decomposition needs the sparse model");
  if (cfg.run.trajectory) throw ConfigError("bias decomposition needs a static target");
  cfg.run.reference = "model_w_true";
  const ExperimentResult total = run_experiment(cfg);
  ExperimentConfig hat = cfg;
  hat.run.reference = "global_minimizer";
  hat.run.theory = false;
  const ExperimentResult vs_hat = run_experiment(hat);

  const double bias = (cfg.cost.w_true - vs_hat.reference).squaredNorm();
  std::vector<BiasDecomposition> out;
  for (std::size_t s = 0; s < total.strategies.size(); ++s) {
    const auto& a = total.strategies[s];
    const auto& b = vs_hat.strategies[s];
    BiasDecomposition d;
    d.strategy = a.name;
    d.bias = bias;
    d.total = a.steady;
    d.vs_minimizer = b.steady;
    if (a.theory && a.theory->network_mse) d.theory_vs_minimizer = *a.theory->network_mse;
    // Both runs drop the same diverged trials, so tails pair up by position.
    if (a.trial_tail.size() == b.trial_tail.size() && !a.trial_tail.empty()) {
      std::vector<double> diff(a.trial_tail.size());
      for (std::size_t t = 0; t < diff.size(); ++t) diff[t] = a.trial_tail[t] - bias - b.trial_tail[t];
      const auto est = steady_state_from_trials(diff, cfg.run.tail_fraction);
      d.residual = est.msd;
      d.residual_se = est.se;
    }
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::string strategy;
  double msd_db = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> theory_msd_db;
  double se_db = 0.0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::vector<std::string> errors;
  bool any_all_diverged = false;
};

inline ExperimentConfig with_parameter(ExperimentConfig cfg, const std::string& param, double value) {
  if (param == "mu") {
    for (auto& s : cfg.strategies) s.mu = {value};
  } else if (param == "rho") {
    cfg.cost.rho = value;
  } else if (param == "epsilon") {
    cfg.cost.epsilon = value;
  } else {
    throw ConfigError("sweep parameter must be mu, rho or epsilon (got '" + param + "')");
  }
  return cfg;
}

/// One experiment per value with the same seeds; a failing value is
/// recorded and the sweep moves on.
inline SweepTable sweep(const ExperimentConfig& cfg, const std::string& param, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if ((param == "rho" || param == "epsilon") && cfg.cost.model != "sparse")
    throw ConfigError("rho/epsilon sweeps need the sparse model");
  SweepTable table;
  for (double v : values) {
    const ExperimentConfig run_cfg = with_parameter(cfg, param, v);
    try {
      const ExperimentResult r = run_experiment(run_cfg);
      table.any_all_diverged = table.any_all_diverged || r.any_all_diverged();
      for (const auto& s : r.strategies) {
        SweepRow row{param, v, s.name, s.steady.msd_db, std::nullopt, s.steady.se_db};
        if (s.theory_msd) row.theory_msd_db = to_db(*s.theory_msd);
        table.rows.push_back(row);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      table.errors.push_back(param + "=" + std::to_string(v) + ": " + e.what());
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Tracking

struct OverlayRow {
  std::size_t iteration = 0;
  std::string strategy;
  Vector target;
  Vector estimate;
};

struct TrackingResult {
  ExperimentResult experiment;
  std::vector<OverlayRow> overlay;  // trial 0, tracked node
};

inline TrackingResult tracking_experiment(const ExperimentConfig& cfg) {
  if (!cfg.run.trajectory) throw ConfigError("tracking needs run.target_trajectory");
  TrackingResult out;
  out.experiment = run_experiment(cfg);
  const auto& traj = *cfg.run.trajectory;
  for (std::size_t i = 0; i <= cfg.run.horizon; ++i)
    for (const auto& s : out.experiment.strategies)
      if (s.tracked.rows() > 0)
        out.overlay.push_back({i, s.name, traj.at(i), s.tracked.row(static_cast<Eigen::Index>(i)).transpose()});
  return out;
}

// ---------------------------------------------------------------------------
// CSV output. Numbers use 17 significant digits so parsing reproduces them.

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CurveRow {
  std::size_t iteration = 0;
  std::string strategy;
  double msd_db = 0.0;
  std::optional<std::size_t> node;

  bool operator==(const CurveRow&) const = default;
};

struct CurveTable {
  bool has_node_column = false;
  std::vector<CurveRow> rows;

  bool operator==(const CurveTable&) const = default;
};

inline CurveTable curve_table(const ExperimentResult& r) {
  CurveTable t;
  t.has_node_column = r.per_node;
  for (const auto& s : r.strategies) {
    for (Eigen::Index i = 0; i < s.curve.size(); ++i)
      t.rows.push_back({static_cast<std::size_t>(i + 1), s.name, to_db(s.curve[i]), std::nullopt});
    if (r.per_node)
      for (Eigen::Index k = 0; k < s.node_curve.cols(); ++k)
        for (Eigen::Index i = 0; i < s.node_curve.rows(); ++i)
          t.rows.push_back({static_cast<std::size_t>(i + 1), s.name, to_db(s.node_curve(i, k)),
                            static_cast<std::size_t>(k)});
  }
  return t;
}

inline void write_curve_csv(const CurveTable& t, std::ostream& os) {
  os << "iteration,strategy,msd_db" << (t.has_node_column ? ",node" : "") << '\n';
  for (const auto& r : t.rows) {
    os << r.iteration << ',' << r.strategy << ',' << format_number(r.msd_db);
    if (t.has_node_column) {
      os << ',';
      if (r.node) os << *r.node;
    }
    os << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline CurveTable read_curve_csv(std::istream& is) {
  CurveTable t;
  std::string line;
  if (!std::getline(is, line)) throw Error("empty curve CSV");
  if (line == "iteration,strategy,msd_db,node")
    t.has_node_column = true;
  else if (line != "iteration,strategy,msd_db")
    throw Error("unexpected curve CSV header '" + line + "'");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != (t.has_node_column ? 4u : 3u)) throw Error("malformed curve CSV line '" + line + "'");
    CurveRow r;
    r.iteration = std::stoull(cells[0]);
    r.strategy = cells[1];
    r.msd_db = std::strtod(cells[2].c_str(), nullptr);
    if (t.has_node_column && !cells[3].empty()) r.node = std::stoull(cells[3]);
    t.rows.push_back(r);
  }
  return t;
}

inline void write_sweep_csv(const SweepTable& t, std::ostream& os) {
  os << "param,value,strategy,msd_db,theory_msd_db\n";
  for (const auto& r : t.rows) {
    os << r.param << ',' << format_number(r.value) << ',' << r.strategy << ',' << format_number(r.msd_db) << ',';
    if (r.theory_msd_db) os << format_number(*r.theory_msd_db);
    os << '\n';
  }
}

inline void write_overlay_csv(const std::vector<OverlayRow>& rows, std::ostream& os) {
  const Eigen::Index m = rows.empty() ? 0 : rows.front().target.size();
  os << "iteration,strategy";
  for (Eigen::Index j = 0; j < m; ++j) os << ",target_" << j;
  for (Eigen::Index j = 0; j < m; ++j) os << ",estimate_" << j;
  os << '\n';
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.strategy;
    for (Eigen::Index j = 0; j < m; ++j) os << ',' << format_number(r.target[j]);
    for (Eigen::Index j = 0; j < m; ++j) os << ',' << format_number(r.estimate[j]);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// JSON documents

inline Json theory_report_json(const theory::TheoryReport& r) {
  Json j;
  if (r.sigma) {
    Json s = Json::array();
    for (const auto& p : *r.sigma) s.push_back({{"min", p.min}, {"max", p.max}});
    j["sigma_k"] = s;
  }
  if (r.mu_bounds) j["mu_bounds"] = detail::to_json(*r.mu_bounds);
  if (r.gamma) j["gamma_k"] = detail::to_json(*r.gamma);
  if (r.w_inf_bound) j["w_inf_bound"] = *r.w_inf_bound;
  if (r.w_inf_bound_small_step) j["w_inf_bound_small_step"] = *r.w_inf_bound_small_step;
  j["step_sizes_within_bounds"] = r.step_sizes_within_bounds;
  j["b_spectral_radius"] = r.b_spectral_radius;
  j["f_spectral_radius"] = r.f_spectral_radius;
  j["f_spectral_radius_from_b"] = !r.f_radius_dense;
  if (r.mse_per_node) j["mse_per_node"] = detail::to_json(*r.mse_per_node);
  if (r.network_mse) {
    j["network_mse"] = *r.network_mse;
    j["network_mse_db"] = to_db(*r.network_mse);
  }
  j["stable"] = r.stable;
  j["local_approximation"] = r.local_approximation;
  j["notes"] = r.notes;
  return j;
}

inline Json metadata_json(const ExperimentResult& r, const std::string& command) {
  Json j;
  j["version"] = kVersion;
  j["command"] = command;
  j["seed"] = r.seed;
  j["n_trials"] = r.n_trials;
  j["horizon"] = r.horizon;
  j["reference"] = detail::to_json(r.reference);
  if (r.bias) j["bias"] = *r.bias;
  j["local_approximation"] = r.local_approximation;
  j["network"] = network_to_json(r.network);
  Json strategies = Json::array();
  for (const auto& s : r.strategies) {
    Json e;
    e["name"] = s.name;
    e["strategy"] = to_string(s.kind);
    e["trials_used"] = s.trials_used;
    e["diverged"] = s.diverged;
    e["steady_state_msd_db"] = s.steady.msd_db;
    e["steady_state_se_db"] = s.steady.se_db;
    e["tail_fraction"] = s.steady.tail_fraction;
    if (s.theory_msd) e["theory_msd_db"] = to_db(*s.theory_msd);
    if (s.theory) e["theory"] = theory_report_json(*s.theory);
    e["notes"] = s.notes;
    strategies.push_back(e);
  }
  j["strategies"] = strategies;
  return j;
}

/// Flat one-row CSV of a theory report's named scalars.
inline void write_theory_csv(const std::vector<std::pair<std::string, theory::TheoryReport>>& reports,
                             std::ostream& os) {
  os << "strategy,stable,b_spectral_radius,f_spectral_radius,w_inf_bound,network_mse,network_mse_db,"
        "local_approximation\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (const auto& [name, r] : reports) {
    os << name << ',' << (r.stable ? 1 : 0) << ',' << format_number(r.b_spectral_radius) << ','
       << format_number(r.f_spectral_radius) << ',' << opt(r.w_inf_bound) << ',' << opt(r.network_mse) << ','
       << (r.network_mse ? format_number(to_db(*r.network_mse)) : std::string()) << ','
       << (r.local_approximation ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Artifact files

inline std::filesystem::path artifact_path(const ExperimentConfig& cfg, const std::string& name) {
  return std::filesystem::path(cfg.output.dir) / (cfg.output.prefix + name);
}

inline std::ofstream open_artifact(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path().empty() ? std::filesystem::path(".") : p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  return os;
}

/// Writes curves.csv and metadata.json; returns the paths written.
inline std::vector<std::filesystem::path> write_experiment(const ExperimentConfig& cfg, const ExperimentResult& r,
                                                           const std::string& command) {
  std::vector<std::filesystem::path> written;
  const auto curves = artifact_path(cfg, "curves.csv");
  {
    auto os = open_artifact(curves);
    write_curve_csv(curve_table(r), os);
  }
  written.push_back(curves);
  const auto meta = artifact_path(cfg, "metadata.json");
  {
    auto os = open_artifact(meta);
    os << metadata_json(r, command).dump(2) << '\n';
  }
  written.push_back(meta);
  return written;
}

}  // namespace diffusion
