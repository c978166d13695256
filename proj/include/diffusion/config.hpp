#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffusion/costs.hpp"
#include "diffusion/graph.hpp"
#include "diffusion/strategies.hpp"

namespace diffusion {

using Json = nlohmann::json;

// Experiment configuration document. Top-level sections: network, cost,
// strategies, run, output. Unknown keys anywhere are rejected.

struct NetworkSpec {
  std::size_t n_nodes = 10;
  double radius = 0.4;
  std::uint64_t seed = 1;
  std::optional<Network> explicit_network;  // inline n_nodes/positions/edges
};

struct CostSpec {
  std::string model = "quadratic";  // quadratic | sparse | localization
  Vector w_true;                     // quadratic / sparse
  std::size_t rows = 1;
  std::vector<double> noise_var{1.0};      // scalar or one per node
  std::vector<double> regressor_var{1.0};  // scalar or one per node
  double rho = 0.0;
  double epsilon = 1e-3;
  Eigen::Vector2d target = Eigen::Vector2d::Zero();  // localization
  double anchor_scale = 1.0;
  Eigen::Vector2d anchor_offset = Eigen::Vector2d::Zero();
};

struct StrategySpec {
  std::string name;
  StrategyKind kind = StrategyKind::atc;
  std::string a_weights = "averaging";  // averaging | metropolis | identity
  std::string c_weights = "identity";   // metropolis | identity
  std::vector<double> mu{1e-3};         // scalar or one per node
  StepSizeSchedule::Kind schedule = StepSizeSchedule::Kind::constant;
};

struct Waypoint {
  std::size_t iteration = 0;
  Vector position;
};

/// Piecewise-linear target path; held at the first/last waypoint outside its span.
struct TargetTrajectory {
  std::vector<Waypoint> waypoints;

  Vector at(std::size_t i) const {
    if (waypoints.empty()) throw ConfigError("trajectory has no waypoints");
    if (i <= waypoints.front().iteration) return waypoints.front().position;
    for (std::size_t j = 1; j < waypoints.size(); ++j) {
      const auto& a = waypoints[j - 1];
      const auto& b = waypoints[j];
      if (i <= b.iteration) {
        const double t = static_cast<double>(i - a.iteration) / static_cast<double>(b.iteration - a.iteration);
        return a.position + t * (b.position - a.position);
      }
    }
    return waypoints.back().position;
  }
};

struct RunSpec {
  std::size_t horizon = 5000;
  std::size_t n_trials = 100;
  std::uint64_t seed = 1;
  std::string reference = "model_w_true";  // model_w_true | global_minimizer
  double tail_fraction = 0.2;
  bool exact_gradients = false;
  bool per_node = false;
  bool theory = true;
  std::size_t workers = 0;  // 0: hardware concurrency
  std::optional<Vector> init;
  std::optional<TargetTrajectory> trajectory;
  std::size_t track_node = 0;
};

struct OutputSpec {
  std::string dir = "out";
  std::string prefix;
};

struct ExperimentConfig {
  NetworkSpec network;
  CostSpec cost;
  std::vector<StrategySpec> strategies;
  RunSpec run;
  OutputSpec output;
};

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

inline void require_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline Vector to_vector(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(where + " must contain numbers only");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline Eigen::Vector2d to_vec2(const Json& j, const std::string& where) {
  Vector v = to_vector(j, where);
  if (v.size() != 2) throw ConfigError(where + " must have two entries");
  return {v[0], v[1]};
}

// Scalar or array of numbers.
inline std::vector<double> scalar_or_list(const Json& j, const std::string& where) {
  if (j.is_number()) return {j.get<double>()};
  Vector v = to_vector(j, where);
  return {v.data(), v.data() + v.size()};
}

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Network document: {"n_nodes": N, "positions": [[x,y],...], "edges": [[i,j],...]}

inline Json network_to_json(const Network& net) {
  Json j;
  j["n_nodes"] = net.size();
  Json pos = Json::array();
  for (const auto& p : net.positions()) pos.push_back({p.x(), p.y()});
  j["positions"] = pos;
  Json edges = Json::array();
  for (const auto& [a, b] : net.edges()) edges.push_back({a, b});
  j["edges"] = edges;
  return j;
}

inline Network network_from_json(const Json& j) {
  detail::require_keys(j, "network", {"n_nodes", "positions", "edges"});
  if (!j.contains("n_nodes") || !j.contains("edges")) throw ConfigError("network needs n_nodes and edges");
  const auto n = j.at("n_nodes").get<std::size_t>();
  std::vector<Network::Edge> edges;
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) throw ConfigError("edges must be [i, j] pairs");
    edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  std::vector<Eigen::Vector2d> pos;
  if (j.contains("positions"))
    for (const auto& p : j.at("positions")) pos.push_back(detail::to_vec2(p, "network.positions"));
  try {
    return Network(n, edges, std::move(pos));
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

inline StrategyKind parse_strategy_kind(const std::string& s) {
  if (s == "atc") return StrategyKind::atc;
  if (s == "cta") return StrategyKind::cta;
  if (s == "noncoop" || s == "noncooperative") return StrategyKind::noncooperative;
  if (s == "incremental") return StrategyKind::incremental;
  if (s == "consensus") return StrategyKind::consensus;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline ExperimentConfig parse_config(const Json& root) {
  detail::require_keys(root, "config", {"network", "cost", "strategies", "run", "output"});
  ExperimentConfig cfg;

  if (root.contains("network")) {
    const Json& j = root.at("network");
    if (j.contains("edges")) {
      cfg.network.explicit_network = network_from_json(j);
      cfg.network.n_nodes = cfg.network.explicit_network->size();
    } else {
      detail::require_keys(j, "network", {"n_nodes", "radius", "seed"});
      cfg.network.n_nodes = detail::get_or<std::size_t>(j, "n_nodes", 10, "network");
      cfg.network.radius = detail::get_or<double>(j, "radius", 0.4, "network");
      cfg.network.seed = detail::get_or<std::uint64_t>(j, "seed", 1, "network");
    }
  }
  if (cfg.network.n_nodes == 0) throw ConfigError("network.n_nodes must be positive");

  if (!root.contains("cost")) throw ConfigError("missing 'cost' section");
  {
    const Json& j = root.at("cost");
    detail::require_keys(j, "cost", {"model", "dim", "w_true", "rows", "noise_var", "regressor_var", "rho",
                                     "epsilon", "target", "anchor_scale", "anchor_offset"});
    auto& c = cfg.cost;
    c.model = detail::get_or<std::string>(j, "model", "quadratic", "cost");
    if (c.model != "quadratic" && c.model != "sparse" && c.model != "localization")
      throw ConfigError("unknown cost model '" + c.model + "'");
    if (j.contains("noise_var")) c.noise_var = detail::scalar_or_list(j.at("noise_var"), "cost.noise_var");
    if (j.contains("regressor_var"))
      c.regressor_var = detail::scalar_or_list(j.at("regressor_var"), "cost.regressor_var");
    c.rows = detail::get_or<std::size_t>(j, "rows", 1, "cost");
    c.rho = detail::get_or<double>(j, "rho", 0.0, "cost");
    c.epsilon = detail::get_or<double>(j, "epsilon", 1e-3, "cost");
    if (c.model == "localization") {
      if (j.contains("dim") || j.contains("w_true") || j.contains("rows"))
        throw ConfigError("localization cost takes target/anchor_* instead of dim/w_true/rows");
      if (j.contains("target")) c.target = detail::to_vec2(j.at("target"), "cost.target");
      c.anchor_scale = detail::get_or<double>(j, "anchor_scale", 1.0, "cost");
      if (j.contains("anchor_offset")) c.anchor_offset = detail::to_vec2(j.at("anchor_offset"), "cost.anchor_offset");
    } else {
      if (j.contains("target") || j.contains("anchor_scale") || j.contains("anchor_offset"))
        throw ConfigError("target/anchor_* only apply to the localization model");
      const auto dim = detail::get_or<std::size_t>(j, "dim", 0, "cost");
      if (!j.contains("w_true")) throw ConfigError("cost.w_true is required");
      const Json& w = j.at("w_true");
      if (w.is_string()) {
        if (dim == 0) throw ConfigError("cost.dim is required with a named w_true");
        const auto m = static_cast<Eigen::Index>(dim);
        const auto name = w.get<std::string>();
        if (name == "ones") {
          c.w_true = Vector::Ones(m);
        } else if (name == "sparse_ends") {
          c.w_true = Vector::Zero(m);
          c.w_true[0] = 1.0;
          c.w_true[m - 1] = 1.0;
        } else {
          throw ConfigError("unknown named w_true '" + name + "'");
        }
      } else {
        c.w_true = detail::to_vector(w, "cost.w_true");
        if (dim != 0 && static_cast<std::size_t>(c.w_true.size()) != dim)
          throw ConfigError("cost.dim does not match w_true length");
      }
      if (c.w_true.size() == 0) throw ConfigError("cost.w_true must be non-empty");
    }
  }

  if (!root.contains("strategies") || !root.at("strategies").is_array() || root.at("strategies").empty())
    throw ConfigError("'strategies' must be a non-empty array");
  std::set<std::string> names;
  for (const Json& j : root.at("strategies")) {
    detail::require_keys(j, "strategy", {"name", "strategy", "a_weights", "c_weights", "mu", "mu_schedule"});
    StrategySpec s;
    const auto kind = detail::get_or<std::string>(j, "strategy", "", "strategy");
    if (kind.empty()) throw ConfigError("strategy entry needs 'strategy'");
    s.kind = parse_strategy_kind(kind);
    s.name = detail::get_or<std::string>(j, "name", kind, "strategy");
    s.a_weights = detail::get_or<std::string>(j, "a_weights", "averaging", "strategy");
    s.c_weights = detail::get_or<std::string>(j, "c_weights", "identity", "strategy");
    if (s.a_weights != "averaging" && s.a_weights != "metropolis" && s.a_weights != "identity")
      throw ConfigError("unknown a_weights '" + s.a_weights + "'");
    if (s.c_weights != "metropolis" && s.c_weights != "identity")
      throw ConfigError("unknown c_weights '" + s.c_weights + "'");
    if (!j.contains("mu")) throw ConfigError("strategy '" + s.name + "' needs mu");
    s.mu = detail::scalar_or_list(j.at("mu"), "strategy.mu");
    for (double v : s.mu)
      if (!(v > 0.0)) throw ConfigError("strategy '" + s.name + "': mu must be positive");
    const auto sched = detail::get_or<std::string>(j, "mu_schedule", "constant", "strategy");
    if (sched == "constant")
      s.schedule = StepSizeSchedule::Kind::constant;
    else if (sched == "harmonic")
      s.schedule = StepSizeSchedule::Kind::harmonic;
    else
      throw ConfigError("unknown mu_schedule '" + sched + "'");
    if (!names.insert(s.name).second) throw ConfigError("duplicate strategy name '" + s.name + "'");
    cfg.strategies.push_back(std::move(s));
  }

  if (root.contains("run")) {
    const Json& j = root.at("run");
    detail::require_keys(j, "run", {"horizon", "n_trials", "seed", "reference", "tail_fraction", "exact_gradients",
                                    "per_node", "theory", "workers", "init", "target_trajectory", "track_node"});
    auto& r = cfg.run;
    r.horizon = detail::get_or<std::size_t>(j, "horizon", r.horizon, "run");
    r.n_trials = detail::get_or<std::size_t>(j, "n_trials", r.n_trials, "run");
    r.seed = detail::get_or<std::uint64_t>(j, "seed", r.seed, "run");
    r.reference = detail::get_or<std::string>(j, "reference", r.reference, "run");
    r.tail_fraction = detail::get_or<double>(j, "tail_fraction", r.tail_fraction, "run");
    r.exact_gradients = detail::get_or<bool>(j, "exact_gradients", false, "run");
    r.per_node = detail::get_or<bool>(j, "per_node", false, "run");
    r.theory = detail::get_or<bool>(j, "theory", true, "run");
    r.workers = detail::get_or<std::size_t>(j, "workers", 0, "run");
    r.track_node = detail::get_or<std::size_t>(j, "track_node", 0, "run");
    if (j.contains("init")) r.init = detail::to_vector(j.at("init"), "run.init");
    if (j.contains("target_trajectory")) {
      const Json& t = j.at("target_trajectory");
      detail::require_keys(t, "run.target_trajectory", {"waypoints"});
      TargetTrajectory traj;
      for (const Json& w : t.at("waypoints")) {
        detail::require_keys(w, "waypoint", {"iteration", "position"});
        traj.waypoints.push_back({w.at("iteration").get<std::size_t>(), detail::to_vector(w.at("position"), "waypoint.position")});
      }
      if (traj.waypoints.empty()) throw ConfigError("target_trajectory needs at least one waypoint");
      for (std::size_t i = 1; i < traj.waypoints.size(); ++i)
        if (traj.waypoints[i].iteration <= traj.waypoints[i - 1].iteration)
          throw ConfigError("waypoint iterations must be strictly increasing");
      r.trajectory = std::move(traj);
    }
  }
  if (cfg.run.horizon == 0) throw ConfigError("run.horizon must be >= 1");
  if (cfg.run.n_trials == 0) throw ConfigError("run.n_trials must be >= 1");
  if (!(cfg.run.tail_fraction > 0.0 && cfg.run.tail_fraction < 1.0))
    throw ConfigError("run.tail_fraction must lie in (0, 1)");
  if (cfg.run.reference != "model_w_true" && cfg.run.reference != "global_minimizer")
    throw ConfigError("run.reference must be model_w_true or global_minimizer");
  if (cfg.run.trajectory && cfg.run.reference != "model_w_true")
    throw ConfigError("a moving target is measured against the current target (reference model_w_true)");

  if (root.contains("output")) {
    const Json& j = root.at("output");
    detail::require_keys(j, "output", {"dir", "prefix"});
    cfg.output.dir = detail::get_or<std::string>(j, "dir", cfg.output.dir, "output");
    cfg.output.prefix = detail::get_or<std::string>(j, "prefix", "", "output");
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  Json root;
  try {
    root = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(root);
}

// ---------------------------------------------------------------------------
// Resolution of specs into concrete objects.

using CostSet = std::variant<std::vector<QuadraticCost>, std::vector<SparseRegCost>, std::vector<LocalizationCost>>;

inline Network build_network(const NetworkSpec& spec) {
  if (spec.explicit_network) return *spec.explicit_network;
  try {
    return geometric_topology(spec.n_nodes, spec.radius, spec.seed);
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
}

namespace detail {

inline double per_node(const std::vector<double>& v, std::size_t k, std::size_t n, const char* what) {
  if (v.size() == 1) return v.front();
  if (v.size() != n) throw ConfigError(std::string(what) + " must be a scalar or have one entry per node");
  return v[k];
}

}  // namespace detail

inline CostSet build_costs(const CostSpec& spec, const Network& net) {
  const std::size_t n = net.size();
  try {
    if (spec.model == "localization") {
      if (!net.has_positions()) throw ConfigError("localization needs node positions");
      std::vector<LocalizationCost> out;
      for (std::size_t k = 0; k < n; ++k) {
        const Eigen::Vector2d anchor = spec.anchor_offset + spec.anchor_scale * net.positions()[k];
        out.emplace_back(anchor, spec.target, detail::per_node(spec.noise_var, k, n, "noise_var"));
      }
      return out;
    }
    std::vector<QuadraticCost> quad;
    for (std::size_t k = 0; k < n; ++k)
      quad.emplace_back(spec.w_true, spec.rows, detail::per_node(spec.noise_var, k, n, "noise_var"),
                        detail::per_node(spec.regressor_var, k, n, "regressor_var"));
    if (spec.model == "quadratic") return quad;
    std::vector<SparseRegCost> out;
    for (auto& q : quad) out.emplace_back(std::move(q), spec.rho, spec.epsilon, n);
    return out;
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("cost: ") + e.what());
  }
}

inline Matrix weights_by_name(const std::string& name, const Network& net) {
  if (name == "averaging") return averaging_weights(net);
  if (name == "metropolis") return metropolis_weights(net);
  if (name == "identity") return Matrix::Identity(static_cast<Eigen::Index>(net.size()), static_cast<Eigen::Index>(net.size()));
  throw ConfigError("unknown weights '" + name + "'");
}

/// Resolves a spec on a network. Incremental strategies take mu / N per
/// node visit so one cycle moves as far as one diffusion update.
inline Strategy build_strategy(const StrategySpec& spec, const Network& net) {
  const std::size_t n = net.size();
  const auto nn = static_cast<Eigen::Index>(n);
  Strategy s;
  s.name = spec.name;
  s.kind = spec.kind;
  s.schedule = spec.schedule;
  Vector mu(nn);
  for (std::size_t k = 0; k < n; ++k) mu[static_cast<Eigen::Index>(k)] = detail::per_node(spec.mu, k, n, "mu");
  const Matrix id = Matrix::Identity(nn, nn);
  const Matrix a = weights_by_name(spec.a_weights, net);
  const Matrix c = weights_by_name(spec.c_weights, net);
  switch (spec.kind) {
    case StrategyKind::atc: s.cm = strategy_matrices(Cooperation::atc, a, c); break;
    case StrategyKind::cta: s.cm = strategy_matrices(Cooperation::cta, a, c); break;
    case StrategyKind::noncooperative: s.cm = strategy_matrices(Cooperation::noncooperative, a, c); break;
    case StrategyKind::consensus: s.cm = {a, id, id, {}}; break;
    case StrategyKind::incremental:
      s.cm = {id, id, id, {}};
      if (spec.mu.size() != 1) throw ConfigError("incremental strategy takes a scalar mu");
      mu.setConstant(spec.mu.front() / static_cast<double>(n));
      break;
  }
  s.cm.mu = mu;
  return s;
}

}  // namespace diffusion
