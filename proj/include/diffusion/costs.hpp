#pragma once

#include <algorithm>
#include <concepts>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "diffusion/common.hpp"

namespace diffusion {

/// Curvature bounds lambda_min I <= Hessian <= lambda_max I.
struct HessianBounds {
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  bool non_convex = false;  // sampled Hessian had a negative eigenvalue
  bool empirical = false;   // bounds come from sampling a region, not a closed form
};

/// E||v(w)||^2 <= alpha ||w - w_ref||^2 + sigma_v2.
struct NoiseMoments {
  double alpha = 0.0;
  double sigma_v2 = 0.0;
};

// Every per-node cost plugs into the strategies and theory through this
// surface. `draw` produces one data sample (the (node, time) realisation);
// the stochastic gradient is a deterministic function of (w, sample).
template <class C>
concept CostModel = requires(const C& c, const Vector& w, Rng& rng, const typename C::Sample& s,
                             Vector& out) {
  { c.dim() } -> std::convertible_to<std::size_t>;
  { c.cost(w) } -> std::convertible_to<double>;
  { c.gradient(w) } -> std::convertible_to<Vector>;
  { c.hessian(w) } -> std::convertible_to<Matrix>;
  { c.draw(rng) } -> std::same_as<typename C::Sample>;
  c.add_stochastic_gradient(w, s, 1.0, out);
  { c.hessian_bounds() } -> std::same_as<HessianBounds>;
  { c.noise_moments(w) } -> std::same_as<NoiseMoments>;
  { c.noise_covariance(w) } -> std::convertible_to<Matrix>;
  { c.minimizer_hint() } -> std::convertible_to<Vector>;
  { c.retarget(w) } -> std::same_as<C>;
};

template <CostModel C>
Vector stochastic_gradient(const C& cost, const Vector& w, const typename C::Sample& sample) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(cost.dim()));
  cost.add_stochastic_gradient(w, sample, 1.0, out);
  return out;
}

template <CostModel C>
Vector stochastic_gradient(const C& cost, const Vector& w, Rng& rng) {
  return stochastic_gradient(cost, w, cost.draw(rng));
}

// ---------------------------------------------------------------------------
// Linear regression data d = U w_true + z with K x M Gaussian regressors,
// entries N(0, regressor_var), and z ~ N(0, noise_var I_K). Cost
// J(w) = E||d - U w||^2, so grad = 2 K r (w - w_true) with r = regressor_var.
class QuadraticCost {
 public:
  struct Sample {
    Matrix u;  // K x M
    Vector d;  // K
  };

  explicit QuadraticCost(Vector w_true, std::size_t rows = 1, double noise_var = 1.0,
                         double regressor_var = 1.0)
      : w_true_(std::move(w_true)), rows_(rows), noise_var_(noise_var), regressor_var_(regressor_var) {
    if (w_true_.size() == 0) throw DimensionError("w_true must be non-empty");
    if (rows_ == 0) throw DimensionError("rows must be positive");
    if (noise_var_ < 0.0) throw DimensionError("noise_var must be non-negative");
    if (!(regressor_var_ > 0.0)) throw DimensionError("regressor_var must be positive");
  }

  std::size_t dim() const { return static_cast<std::size_t>(w_true_.size()); }
  std::size_t rows() const { return rows_; }
  double noise_var() const { return noise_var_; }
  double regressor_var() const { return regressor_var_; }
  const Vector& w_true() const { return w_true_; }

  /// Diagonal entry of E(U^T U) = K r I.
  double second_moment() const { return static_cast<double>(rows_) * regressor_var_; }

  double cost(const Vector& w) const {
    return second_moment() * (w - w_true_).squaredNorm() + static_cast<double>(rows_) * noise_var_;
  }

  Vector gradient(const Vector& w) const { return 2.0 * second_moment() * (w - w_true_); }

  Matrix hessian(const Vector&) const {
    const auto m = static_cast<Eigen::Index>(dim());
    return 2.0 * second_moment() * Matrix::Identity(m, m);
  }

  Sample draw(Rng& rng) const {
    Normal normal(0.0, 1.0);
    const auto k = static_cast<Eigen::Index>(rows_);
    const auto m = static_cast<Eigen::Index>(dim());
    const double su = std::sqrt(regressor_var_);
    const double sz = std::sqrt(noise_var_);
    Sample s{Matrix(k, m), Vector(k)};
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index i = 0; i < k; ++i) s.u(i, j) = su * normal(rng);
    for (Eigen::Index i = 0; i < k; ++i) s.d[i] = sz * normal(rng);
    s.d.noalias() += s.u * w_true_;
    return s;
  }

  /// out += weight * 2 U^T (U w - d)
  void add_stochastic_gradient(const Vector& w, const Sample& s, double weight, Vector& out) const {
    Vector residual = s.u * w - s.d;
    out.noalias() += (2.0 * weight) * (s.u.transpose() * residual);
  }

  HessianBounds hessian_bounds() const {
    const double lam = 2.0 * second_moment();
    return {lam, lam, false, false};
  }

  /// Exact moments for Gaussian regressors: alpha = 4 K r^2 (M + 1),
  /// sigma_v2 = 4 sigma_z^2 Tr(E U^T U). Relative to a reference other than
  /// w_true the bound picks up the offset through ||a+b||^2 <= 2||a||^2 + 2||b||^2.
  NoiseMoments noise_moments(const Vector& reference) const {
    const double m = static_cast<double>(dim());
    const double alpha = 4.0 * second_moment() * regressor_var_ * (m + 1.0);
    const double sigma_v2 = 4.0 * noise_var_ * second_moment() * m;
    const double offset = (reference - w_true_).squaredNorm();
    if (offset == 0.0) return {alpha, sigma_v2};
    return {2.0 * alpha, sigma_v2 + 2.0 * alpha * offset};
  }

  /// Cov of v(w) = 2(U^T U - K r I)(w - w_true) - 2 U^T z.
  Matrix noise_covariance(const Vector& w) const {
    const Vector delta = w - w_true_;
    const double kr2 = second_moment() * regressor_var_;
    Matrix cov = 4.0 * kr2 * (delta * delta.transpose());
    cov.diagonal().array() += 4.0 * kr2 * delta.squaredNorm() + 4.0 * noise_var_ * second_moment();
    return cov;
  }

  Vector minimizer_hint() const { return w_true_; }

  QuadraticCost retarget(const Vector& target) const {
    QuadraticCost c = *this;
    c.w_true_ = target;
    return c;
  }

 private:
  Vector w_true_;
  std::size_t rows_;
  double noise_var_;
  double regressor_var_;
};

// ---------------------------------------------------------------------------
// Smoothed l1 penalty R(w) = sum_m sqrt(w_m^2 + eps^2).
inline double smooth_l1(const Vector& w, double eps) {
  return (w.array().square() + eps * eps).sqrt().sum();
}

inline Vector smooth_l1_gradient(const Vector& w, double eps) {
  return (w.array() / (w.array().square() + eps * eps).sqrt()).matrix();
}

/// Diagonal of the penalty Hessian: eps^2 / (w_m^2 + eps^2)^{3/2}.
inline Vector smooth_l1_curvature(const Vector& w, double eps) {
  const double e2 = eps * eps;
  return (e2 / (w.array().square() + e2).pow(1.5)).matrix();
}

/// J_l(w) = E||d - U w||^2 + (rho / N) R(w): the per-node share of a
/// regularised least-squares problem split across N nodes.
class SparseRegCost {
 public:
  using Sample = QuadraticCost::Sample;

  SparseRegCost(QuadraticCost base, double rho, double epsilon, std::size_t n_nodes_total)
      : base_(std::move(base)), rho_(rho), epsilon_(epsilon), n_total_(n_nodes_total) {
    if (rho_ < 0.0) throw DimensionError("rho must be non-negative");
    if (!(epsilon_ > 0.0)) throw DimensionError("epsilon must be positive");
    if (n_total_ == 0) throw DimensionError("n_nodes_total must be positive");
  }

  std::size_t dim() const { return base_.dim(); }
  const QuadraticCost& base() const { return base_; }
  double rho() const { return rho_; }
  double epsilon() const { return epsilon_; }
  std::size_t n_nodes_total() const { return n_total_; }
  const Vector& w_true() const { return base_.w_true(); }

  /// rho / N, the weight of the penalty in this node's share.
  double penalty_weight() const { return rho_ / static_cast<double>(n_total_); }

  double cost(const Vector& w) const {
    return base_.cost(w) + penalty_weight() * smooth_l1(w, epsilon_);
  }

  Vector gradient(const Vector& w) const {
    Vector g = base_.gradient(w);
    if (rho_ != 0.0) g += penalty_weight() * smooth_l1_gradient(w, epsilon_);
    return g;
  }

  Matrix hessian(const Vector& w) const {
    Matrix h = base_.hessian(w);
    if (rho_ != 0.0) h.diagonal() += penalty_weight() * smooth_l1_curvature(w, epsilon_);
    return h;
  }

  Sample draw(Rng& rng) const { return base_.draw(rng); }

  void add_stochastic_gradient(const Vector& w, const Sample& s, double weight, Vector& out) const {
    base_.add_stochastic_gradient(w, s, weight, out);
    if (rho_ != 0.0) out += (weight * penalty_weight()) * smooth_l1_gradient(w, epsilon_);
  }

  /// Penalty curvature peaks at w_m = 0 where it equals 1/eps.
  HessianBounds hessian_bounds() const {
    HessianBounds b = base_.hessian_bounds();
    b.lambda_max += penalty_weight() / epsilon_;
    return b;
  }

  NoiseMoments noise_moments(const Vector& reference) const { return base_.noise_moments(reference); }
  Matrix noise_covariance(const Vector& w) const { return base_.noise_covariance(w); }
  Vector minimizer_hint() const { return base_.w_true(); }

  SparseRegCost retarget(const Vector& target) const {
    return SparseRegCost(base_.retarget(target), rho_, epsilon_, n_total_);
  }

 private:
  QuadraticCost base_;
  double rho_;
  double epsilon_;
  std::size_t n_total_;
};

// ---------------------------------------------------------------------------
// Range-based localisation. Node at `anchor` measures
// d = ||target - anchor||^2 + z, z ~ N(0, noise_var), and holds
// J(w) = (1/4) E|d - ||w - anchor||^2|^2. The cost is quartic and
// non-convex; w = anchor is a stationary point of every realisation.
class LocalizationCost {
 public:
  struct Sample {
    double d = 0.0;
  };

  LocalizationCost(Eigen::Vector2d anchor, Eigen::Vector2d target, double noise_var = 1.0,
                   double region_half_width = 0.0)
      : anchor_(anchor), target_(target), noise_var_(noise_var), region_(region_half_width) {
    if (noise_var_ < 0.0) throw DimensionError("noise_var must be non-negative");
  }

  std::size_t dim() const { return 2; }
  const Eigen::Vector2d& anchor() const { return anchor_; }
  const Eigen::Vector2d& target() const { return target_; }
  double noise_var() const { return noise_var_; }

  /// E d = ||target - anchor||^2.
  double mean_measurement() const { return (target_ - anchor_).squaredNorm(); }

  double cost(const Vector& w) const {
    const double gap = mean_measurement() - (w - anchor_).squaredNorm();
    return 0.25 * (gap * gap + noise_var_);
  }

  Vector gradient(const Vector& w) const {
    const Vector r = w - anchor_;
    return (r.squaredNorm() - mean_measurement()) * r;
  }

  Matrix hessian(const Vector& w) const {
    const Vector r = w - anchor_;
    Matrix h = 2.0 * (r * r.transpose());
    h.diagonal().array() += r.squaredNorm() - mean_measurement();
    return h;
  }

  Sample draw(Rng& rng) const {
    Normal normal(0.0, std::sqrt(noise_var_));
    return {mean_measurement() + normal(rng)};
  }

  /// out += weight * (||w - x||^2 - d)(w - x)
  void add_stochastic_gradient(const Vector& w, const Sample& s, double weight, Vector& out) const {
    const Eigen::Vector2d r = w - anchor_;
    out += (weight * (r.squaredNorm() - s.d)) * r;
  }

  /// Sampled over a square around the target; the cost violates a global
  /// curvature bound, so the result is empirical and flagged.
  HessianBounds hessian_bounds() const {
    const double half = region_ > 0.0 ? region_ : std::max(1.0, 2.0 * (target_ - anchor_).norm());
    constexpr int kGrid = 41;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int i = 0; i < kGrid; ++i) {
      for (int j = 0; j < kGrid; ++j) {
        Eigen::Vector2d w = target_ + half * Eigen::Vector2d(-1.0 + 2.0 * i / (kGrid - 1),
                                                             -1.0 + 2.0 * j / (kGrid - 1));
        Eigen::SelfAdjointEigenSolver<Matrix> es(hessian(w), Eigen::EigenvaluesOnly);
        lo = std::min(lo, es.eigenvalues().minCoeff());
        hi = std::max(hi, es.eigenvalues().maxCoeff());
      }
    }
    return {lo, hi, lo < 0.0, true};
  }

  /// v(w) = -z (w - x): E||v||^2 = s^2 ||w - x||^2 <= 2 s^2 ||w - ref||^2 + 2 s^2 ||ref - x||^2.
  NoiseMoments noise_moments(const Vector& reference) const {
    return {2.0 * noise_var_, 2.0 * noise_var_ * (reference - anchor_).squaredNorm()};
  }

  Matrix noise_covariance(const Vector& w) const {
    const Vector r = w - anchor_;
    return noise_var_ * (r * r.transpose());
  }

  Vector minimizer_hint() const { return target_; }

  LocalizationCost retarget(const Vector& target) const {
    LocalizationCost c = *this;
    c.target_ = target;
    return c;
  }

 private:
  Eigen::Vector2d anchor_;
  Eigen::Vector2d target_;
  double noise_var_;
  double region_;
};

// ---------------------------------------------------------------------------

template <CostModel C>
double total_cost(std::span<const C> costs, const Vector& w) {
  double sum = 0.0;
  for (const auto& c : costs) sum += c.cost(w);
  return sum;
}

template <CostModel C>
Vector total_gradient(std::span<const C> costs, const Vector& w) {
  Vector g = Vector::Zero(w.size());
  for (const auto& c : costs) g += c.gradient(w);
  return g;
}

/// argmin of sum_l J_l by exact-gradient descent. The step starts at
/// 1/sum(lambda_max) and is halved whenever the cost goes up.
template <CostModel C>
Vector global_minimizer(std::span<const C> costs, double tol = 1e-10,
                        std::size_t max_iterations = 1'000'000) {
  if (costs.empty()) throw DimensionError("global_minimizer needs at least one cost");
  double lmax = 0.0;
  Vector w = Vector::Zero(static_cast<Eigen::Index>(costs.front().dim()));
  for (const auto& c : costs) {
    lmax += std::max(0.0, c.hessian_bounds().lambda_max);
    w += c.minimizer_hint();
  }
  w /= static_cast<double>(costs.size());
  double step = lmax > 0.0 ? 1.0 / lmax : 1.0;

  Vector g = total_gradient(costs, w);
  double f = total_cost(costs, w);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    if (g.norm() <= tol) return w;
    Vector next = w - step * g;
    double f_next = total_cost(costs, next);
    // Allow round-off level increases once the gradient is tiny.
    if (f_next > f + 1e-12 * std::max(1.0, std::abs(f))) {
      step *= 0.5;
      continue;
    }
    w = std::move(next);
    f = f_next;
    g = total_gradient(costs, w);
  }
  throw ConvergenceError("global_minimizer: gradient norm " + std::to_string(g.norm()) +
                         " above tolerance after max iterations");
}

}  // namespace diffusion
