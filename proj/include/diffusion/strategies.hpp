#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffusion/costs.hpp"
#include "diffusion/graph.hpp"

namespace diffusion {

/// Step-size sequence: constant mu, or harmonic c / i for i >= 1.
struct StepSizeSchedule {
  enum class Kind { constant, harmonic };

  Kind kind = Kind::constant;
  double base = 0.0;

  /// Multiplier applied to the base step at update i (1-based).
  static double factor(Kind kind, std::size_t i) {
    return kind == Kind::harmonic ? 1.0 / static_cast<double>(i == 0 ? 1 : i) : 1.0;
  }

  double at(std::size_t i) const { return base * factor(kind, i); }
};

/// Network iterate: column k holds w_{k,i}. `psi` keeps the last intermediate estimate.
struct StrategyState {
  Matrix w;
  Matrix psi;
  std::size_t iteration = 0;

  static StrategyState zeros(std::size_t dim, std::size_t n_nodes) {
    const auto m = static_cast<Eigen::Index>(dim);
    const auto n = static_cast<Eigen::Index>(n_nodes);
    return {Matrix::Zero(m, n), Matrix::Zero(m, n), 0};
  }

  static StrategyState uniform(const Vector& w0, std::size_t n_nodes) {
    StrategyState s = zeros(static_cast<std::size_t>(w0.size()), n_nodes);
    s.w.colwise() = w0;
    s.psi = s.w;
    return s;
  }

  std::size_t dim() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t n_nodes() const { return static_cast<std::size_t>(w.cols()); }
};

/// Draws one data sample per node, in node order, from the node streams.
template <CostModel C>
std::vector<typename C::Sample> draw_samples(std::span<const C> costs, std::span<Rng> streams) {
  if (streams.size() != costs.size()) throw DimensionError("one stream per node required");
  std::vector<typename C::Sample> out;
  out.reserve(costs.size());
  for (std::size_t k = 0; k < costs.size(); ++k) out.push_back(costs[k].draw(streams[k]));
  return out;
}

namespace detail {

// An empty sample span selects exact gradients.
template <CostModel C>
void add_gradient(const C& cost, const Vector& w, std::span<const typename C::Sample> samples,
                  std::size_t node, double weight, Vector& out) {
  if (samples.empty())
    out += weight * cost.gradient(w);
  else
    cost.add_stochastic_gradient(w, samples[node], weight, out);
}

inline void check_finite(const Matrix& w, std::size_t iteration, const char* what) {
  if (!w.allFinite()) throw DivergenceError(iteration, std::string(what) + " produced a non-finite estimate");
}

template <CostModel C>
void check_shapes(const StrategyState& state, std::size_t n_weights, std::span<const C> costs,
                  const Vector& mu) {
  const std::size_t n = state.n_nodes();
  if (n_weights != n || costs.size() != n || static_cast<std::size_t>(mu.size()) != n)
    throw DimensionError("state, weights, costs and mu must agree on the node count");
}

}  // namespace detail

/// One synchronous update of the general recursion
///   phi_k = sum_l p1[l][k] w_l
///   psi_k = phi_k - mu_k sum_l s[l][k] grad_l(phi_k)
///   w'_k  = sum_l p2[l][k] psi_l
/// Every node reads iteration i-1 values only. `samples` holds node l's
/// data at this time instant; pass an empty span for exact gradients.
template <CostModel C>
StrategyState diffusion_step(const StrategyState& state, const CombinationMatrices& cm,
                             const Vector& mu, std::span<const C> costs,
                             std::span<const typename C::Sample> samples) {
  detail::check_shapes(state, cm.size(), costs, mu);
  const auto n = static_cast<Eigen::Index>(state.n_nodes());
  const auto m = static_cast<Eigen::Index>(state.dim());

  Matrix phi = Matrix::Zero(m, n);
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index l = 0; l < n; ++l)
      if (cm.p1(l, k) != 0.0) phi.col(k) += cm.p1(l, k) * state.w.col(l);

  StrategyState next{Matrix::Zero(m, n), Matrix(m, n), state.iteration + 1};
  Vector grad(m);
  for (Eigen::Index k = 0; k < n; ++k) {
    grad.setZero();
    const Vector phi_k = phi.col(k);
    for (Eigen::Index l = 0; l < n; ++l)
      if (cm.s(l, k) != 0.0)
        detail::add_gradient(costs[static_cast<std::size_t>(l)], phi_k, samples,
                             static_cast<std::size_t>(l), cm.s(l, k), grad);
    next.psi.col(k) = phi_k - mu[k] * grad;
  }

  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index l = 0; l < n; ++l)
      if (cm.p2(l, k) != 0.0) next.w.col(k) += cm.p2(l, k) * next.psi.col(l);

  detail::check_finite(next.w, next.iteration, "diffusion step");
  return next;
}

template <CostModel C>
StrategyState diffusion_step(const StrategyState& state, const CombinationMatrices& cm,
                             std::span<const C> costs, std::span<const typename C::Sample> samples) {
  return diffusion_step(state, cm, cm.mu, costs, samples);
}

/// Draws this instant's data from the node streams (unless `exact`) and steps.
template <CostModel C>
StrategyState diffusion_step(const StrategyState& state, const CombinationMatrices& cm,
                             std::span<const C> costs, std::span<Rng> streams, bool exact) {
  if (exact) return diffusion_step(state, cm, cm.mu, costs, std::span<const typename C::Sample>{});
  const auto samples = draw_samples(costs, streams);
  return diffusion_step(state, cm, cm.mu, costs, std::span<const typename C::Sample>(samples));
}

/// Adapt-then-combine: (P1, P2, S) = (I, A, C).
template <CostModel C>
StrategyState atc_step(const StrategyState& state, const Matrix& a, const Matrix& c, const Vector& mu,
                       std::span<const C> costs, std::span<const typename C::Sample> samples) {
  CombinationMatrices cm = strategy_matrices(Cooperation::atc, a, c);
  return diffusion_step(state, cm, mu, costs, samples);
}

/// Combine-then-adapt: (P1, P2, S) = (A, I, C).
template <CostModel C>
StrategyState cta_step(const StrategyState& state, const Matrix& a, const Matrix& c, const Vector& mu,
                       std::span<const C> costs, std::span<const typename C::Sample> samples) {
  CombinationMatrices cm = strategy_matrices(Cooperation::cta, a, c);
  return diffusion_step(state, cm, mu, costs, samples);
}

/// One incremental pass over nodes 0..N-1 in fixed order:
/// psi_k = psi_{k-1} - mu grad_k(psi_{k-1}), returning psi_N.
template <CostModel C>
Vector incremental_cycle(const Vector& w_prev, std::span<const C> costs, double mu,
                         std::span<const typename C::Sample> samples, std::size_t iteration = 0) {
  if (!samples.empty() && samples.size() != costs.size())
    throw DimensionError("one sample per node required");
  Vector psi = w_prev;
  Vector grad(psi.size());
  for (std::size_t k = 0; k < costs.size(); ++k) {
    grad.setZero();
    detail::add_gradient(costs[k], psi, samples, k, 1.0, grad);
    psi -= mu * grad;
  }
  if (!psi.allFinite()) throw DivergenceError(iteration, "incremental cycle produced a non-finite estimate");
  return psi;
}

/// w'_k = sum_l a[l][k] w_l - mu_k grad_k(w_k). The gradient is taken at the
/// pre-combination iterate, unlike CTA which uses the combined one.
template <CostModel C>
StrategyState consensus_step(const StrategyState& state, const Matrix& a, const Vector& mu,
                             std::span<const C> costs, std::span<const typename C::Sample> samples) {
  detail::check_shapes(state, static_cast<std::size_t>(a.rows()), costs, mu);
  const auto n = static_cast<Eigen::Index>(state.n_nodes());
  const auto m = static_cast<Eigen::Index>(state.dim());
  StrategyState next{Matrix::Zero(m, n), Matrix(m, n), state.iteration + 1};
  Vector grad(m);
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index l = 0; l < n; ++l)
      if (a(l, k) != 0.0) next.w.col(k) += a(l, k) * state.w.col(l);
    grad.setZero();
    detail::add_gradient(costs[static_cast<std::size_t>(k)], Vector(state.w.col(k)), samples,
                         static_cast<std::size_t>(k), 1.0, grad);
    next.w.col(k) -= mu[k] * grad;
  }
  next.psi = next.w;
  detail::check_finite(next.w, next.iteration, "consensus step");
  return next;
}

// ---------------------------------------------------------------------------

enum class StrategyKind { atc, cta, noncooperative, incremental, consensus };

inline const char* to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::atc: return "atc";
    case StrategyKind::cta: return "cta";
    case StrategyKind::noncooperative: return "noncoop";
    case StrategyKind::incremental: return "incremental";
    case StrategyKind::consensus: return "consensus";
  }
  return "?";
}

/// A fully resolved strategy instance. For consensus, `cm.p1` carries A.
/// For incremental, every entry of `mu` is the per-visit step.
struct Strategy {
  std::string name;
  StrategyKind kind = StrategyKind::atc;
  CombinationMatrices cm;
  StepSizeSchedule::Kind schedule = StepSizeSchedule::Kind::constant;

  bool has_theory() const {
    return schedule == StepSizeSchedule::Kind::constant &&
           (kind == StrategyKind::atc || kind == StrategyKind::cta ||
            kind == StrategyKind::noncooperative);
  }
};

/// Advances `state` by one update of `strategy`, using step-size index state.iteration + 1.
template <CostModel C>
StrategyState apply_step(const Strategy& strategy, const StrategyState& state, std::span<const C> costs,
                         std::span<const typename C::Sample> samples) {
  const std::size_t i = state.iteration + 1;
  const Vector mu = strategy.cm.mu * StepSizeSchedule::factor(strategy.schedule, i);
  switch (strategy.kind) {
    case StrategyKind::atc:
    case StrategyKind::cta:
    case StrategyKind::noncooperative:
      return diffusion_step(state, strategy.cm, mu, costs, samples);
    case StrategyKind::consensus:
      return consensus_step(state, strategy.cm.p1, mu, costs, samples);
    case StrategyKind::incremental: {
      const Vector w = incremental_cycle(Vector(state.w.col(0)), costs, mu[0], samples, i);
      StrategyState next = StrategyState::uniform(w, state.n_nodes());
      next.iteration = i;
      return next;
    }
  }
  throw Error("unknown strategy kind");
}

/// Per-iteration record of one strategy over one trial. Row i of
/// `squared_error` is ||ref(i) - w_{k,i}||^2 per node, row 0 the initial state.
struct Trajectory {
  Matrix squared_error;
  Matrix tracked_estimate;  // rows: iterations, cols: M; empty unless requested
  StrategyState final_state;
  std::optional<std::size_t> diverged_at;
};

struct RunOptions {
  std::size_t horizon = 0;
  bool exact = false;
  std::optional<Vector> init;  // defaults to zero
  Vector reference;            // fixed reference vector for the squared error
  // When set, costs are retargeted to moving_target(i) before drawing data
  // at update i, and the error at i is measured against moving_target(i).
  std::function<Vector(std::size_t)> moving_target;
  std::optional<std::size_t> track_node;  // record this node's estimate per iteration
};

/// Runs several strategies side by side on one trial. Each node's stream
/// yields exactly one sample per update, shared by every strategy, so
/// curve differences come from the strategies alone. A strategy that
/// produces a non-finite value is frozen and marked as diverged.
template <CostModel C>
std::vector<Trajectory> run_lockstep(std::span<const Strategy> strategies, std::span<const C> costs,
                                     std::span<Rng> streams, const RunOptions& options) {
  const std::size_t n = costs.size();
  if (n == 0) throw DimensionError("run needs at least one node");
  const std::size_t m = costs.front().dim();
  const auto rows = static_cast<Eigen::Index>(options.horizon + 1);
  const auto cols = static_cast<Eigen::Index>(n);

  const Vector init = options.init.value_or(Vector::Zero(static_cast<Eigen::Index>(m)));
  if (static_cast<std::size_t>(init.size()) != m) throw DimensionError("init has wrong dimension");
  auto reference_at = [&](std::size_t i) -> Vector {
    if (options.moving_target) return options.moving_target(i);
    return options.reference;
  };
  if (!options.moving_target && static_cast<std::size_t>(options.reference.size()) != m)
    throw DimensionError("reference has wrong dimension");

  std::vector<Trajectory> out(strategies.size());
  std::vector<StrategyState> states(strategies.size(), StrategyState::uniform(init, n));
  auto record = [&](std::size_t s, std::size_t i, const Vector& ref) {
    auto& tr = out[s];
    for (Eigen::Index k = 0; k < cols; ++k)
      tr.squared_error(static_cast<Eigen::Index>(i), k) = (ref - states[s].w.col(k)).squaredNorm();
    if (options.track_node)
      tr.tracked_estimate.row(static_cast<Eigen::Index>(i)) =
          states[s].w.col(static_cast<Eigen::Index>(*options.track_node)).transpose();
  };

  for (std::size_t s = 0; s < strategies.size(); ++s) {
    out[s].squared_error = Matrix::Constant(rows, cols, std::numeric_limits<double>::quiet_NaN());
    if (options.track_node) {
      if (*options.track_node >= n) throw DimensionError("track_node out of range");
      out[s].tracked_estimate = Matrix::Constant(rows, static_cast<Eigen::Index>(m),
                                                 std::numeric_limits<double>::quiet_NaN());
    }
    record(s, 0, reference_at(0));
  }

  std::vector<C> moved;
  std::span<const C> current = costs;
  using Sample = typename C::Sample;
  for (std::size_t i = 1; i <= options.horizon; ++i) {
    if (options.moving_target) {
      const Vector target = options.moving_target(i);
      moved.clear();
      for (const auto& c : costs) moved.push_back(c.retarget(target));
      current = std::span<const C>(moved);
    }
    std::vector<Sample> samples;
    if (!options.exact) samples = draw_samples(current, streams);
    const Vector ref = reference_at(i);
    for (std::size_t s = 0; s < strategies.size(); ++s) {
      if (out[s].diverged_at) continue;
      try {
        states[s] = apply_step(strategies[s], states[s], current, std::span<const Sample>(samples));
      } catch (const DivergenceError&) {
        out[s].diverged_at = i;
        continue;
      }
      record(s, i, ref);
    }
  }
  for (std::size_t s = 0; s < strategies.size(); ++s) out[s].final_state = states[s];
  return out;
}

/// Single-strategy run. Deterministic given the streams; divergence is
/// reported by throwing DivergenceError with the failing iteration.
template <CostModel C>
Trajectory run(const Strategy& strategy, std::span<const C> costs, std::span<Rng> streams,
               const RunOptions& options) {
  auto out = run_lockstep(std::span<const Strategy>(&strategy, 1), costs, streams, options);
  if (out.front().diverged_at)
    throw DivergenceError(*out.front().diverged_at, "strategy '" + strategy.name + "' diverged");
  return std::move(out.front());
}

/// Fresh per-node data streams for one trial.
inline std::vector<Rng> trial_streams(std::uint64_t seed, std::uint64_t trial, std::size_t n_nodes) {
  std::vector<Rng> streams;
  streams.reserve(n_nodes);
  for (std::size_t k = 0; k < n_nodes; ++k) streams.push_back(make_stream(seed, trial, k));
  return streams;
}

}  // namespace diffusion
