#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/KroneckerProduct>

#include "diffusion/costs.hpp"
#include "diffusion/graph.hpp"

namespace diffusion::theory {

// Mean-square performance of the general diffusion recursion. Stacked
// vectors are node-major (block k = node k), vec() is column-major, and
// F = B^T (x) B^T so that F vec(S) = vec(B^T S B).

/// Largest MN for which F is formed densely and (I - F) is factored.
constexpr std::size_t kDenseLimit = 32;
/// Largest MN for which rho(F) is computed from the eigenvalues of F itself.
constexpr std::size_t kDenseRadiusLimit = 16;

struct SigmaPair {
  double min = 0.0;
  double max = 0.0;
};

inline double spectral_radius(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(a, false);
  if (es.info() != Eigen::Success) throw Error("eigenvalue computation failed");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Induced 1-norm (maximum absolute column sum).
inline double one_norm(const Matrix& s) { return s.cwiseAbs().colwise().sum().maxCoeff(); }

/// sigma_{k,max} = sum_l s[l][k] lambda_{l,max}, likewise for min. Requires sigma_{k,min} > 0.
inline std::vector<SigmaPair> sigma_minmax(const Matrix& s, std::span<const HessianBounds> bounds) {
  const auto n = static_cast<std::size_t>(s.cols());
  if (bounds.size() != n || s.rows() != s.cols()) throw DimensionError("sigma_minmax: size mismatch");
  std::vector<SigmaPair> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < n; ++l) {
      const double w = s(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k));
      out[k].min += w * bounds[l].lambda_min;
      out[k].max += w * bounds[l].lambda_max;
    }
    if (!(out[k].min > 0.0))
      throw AssumptionViolation("aggregate curvature sigma_min is not positive at node " +
                                std::to_string(k) + " (" + std::to_string(out[k].min) + ")");
  }
  return out;
}

/// Upper end of the mean-square stable step-size interval (0, bound) for one node.
inline double stable_stepsize_bound(const SigmaPair& sigma, double alpha, double s_one_norm) {
  const double a = alpha * s_one_norm * s_one_norm;
  return std::min(2.0 * sigma.max / (sigma.max * sigma.max + a),
                  2.0 * sigma.min / (sigma.min * sigma.min + a));
}

/// Contraction factor max(|1 - mu sigma_max|, |1 - mu sigma_min|).
inline double gamma_k(double mu, const SigmaPair& sigma) {
  return std::max(std::abs(1.0 - mu * sigma.max), std::abs(1.0 - mu * sigma.min));
}

struct WorstNodeBound {
  double bound = 0.0;             // steady-state bound on max_k MSE_k
  std::optional<double> small_step;  // ||S||^2 sigma_v2 mu_max^2 / (2 mu_min min_k sigma_k,min)
};

/// Bound on the worst node's steady-state MSE:
///   max mu^2 ||S||_1^2 sigma_v2 / (1 - max_k(gamma_k^2 + mu_k^2 alpha ||S||_1^2)).
inline WorstNodeBound worst_node_mse_bound(const Vector& mu, const Vector& gamma, double alpha,
                                           double sigma_v2, double s_one_norm,
                                           std::span<const SigmaPair> sigma = {}) {
  if (mu.size() != gamma.size() || mu.size() == 0) throw DimensionError("mu/gamma size mismatch");
  const double s2 = s_one_norm * s_one_norm;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < mu.size(); ++k)
    worst = std::max(worst, gamma[k] * gamma[k] + mu[k] * mu[k] * alpha * s2);
  const double denom = 1.0 - worst;
  if (!(denom > 0.0))
    throw UnstableError("worst-node bound undefined: max_k(gamma_k^2 + mu_k^2 alpha ||S||^2) >= 1");
  const double mu_max = mu.maxCoeff();
  WorstNodeBound out;
  out.bound = mu_max * mu_max * s2 * sigma_v2 / denom;
  if (!sigma.empty()) {
    double smin = std::numeric_limits<double>::infinity();
    for (const auto& p : sigma) smin = std::min(smin, p.min);
    out.small_step = s2 * sigma_v2 * mu_max * mu_max / (2.0 * mu.minCoeff() * smin);
  }
  return out;
}

/// Block-diagonal steady-state Hessian aggregate: block k = sum_l s[l][k] H_l.
inline Matrix d_infinity(const Matrix& s, std::span<const Matrix> hessians) {
  const auto n = s.cols();
  if (static_cast<Eigen::Index>(hessians.size()) != n) throw DimensionError("one Hessian per node");
  const auto m = hessians.front().rows();
  Matrix d = Matrix::Zero(m * n, m * n);
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index l = 0; l < n; ++l)
      if (s(l, k) != 0.0) d.block(k * m, k * m, m, m) += s(l, k) * hessians[static_cast<std::size_t>(l)];
  return d;
}

inline Matrix expand(const Matrix& p, Eigen::Index m) {
  return Eigen::kroneckerProduct(p, Matrix::Identity(m, m)).eval();
}

/// B = P2^T [I - M D_inf] P1^T with M = diag(mu) (x) I_M.
inline Matrix b_matrix(const CombinationMatrices& cm, const Matrix& d_inf) {
  const auto n = static_cast<Eigen::Index>(cm.size());
  if (cm.mu.size() != n) throw DimensionError("b_matrix needs one step-size per node");
  if (d_inf.rows() % n != 0) throw DimensionError("D_inf size is not a multiple of N");
  const auto m = d_inf.rows() / n;
  Vector mu_diag(n * m);
  for (Eigen::Index k = 0; k < n; ++k) mu_diag.segment(k * m, m).setConstant(cm.mu[k]);
  Matrix inner = -(mu_diag.asDiagonal() * d_inf);
  inner.diagonal().array() += 1.0;
  return expand(cm.p2, m).transpose() * inner * expand(cm.p1, m).transpose();
}

/// F = B^T (x) B^T, size (MN)^2.
inline Matrix f_matrix(const Matrix& b) {
  const Matrix bt = b.transpose();
  return Eigen::kroneckerProduct(bt, bt).eval();
}

/// Block maximum norm of a stacked vector: max_k ||x_k||.
inline double block_max_norm(const Vector& x, std::size_t block) {
  if (block == 0 || x.size() % static_cast<Eigen::Index>(block) != 0)
    throw DimensionError("vector length not divisible by block size");
  const auto m = static_cast<Eigen::Index>(block);
  double best = 0.0;
  for (Eigen::Index k = 0; k < x.size() / m; ++k) best = std::max(best, x.segment(k * m, m).norm());
  return best;
}

/// Block maximum norm of a block-diagonal matrix, max_k ||X_k||_2. Only the
/// block-diagonal case is supported; for symmetric X this is the exact
/// induced norm.
inline double block_max_norm(const Matrix& x, std::size_t block, double off_diagonal_tol = 0.0) {
  const auto m = static_cast<Eigen::Index>(block);
  if (block == 0 || x.rows() != x.cols() || x.rows() % m != 0)
    throw DimensionError("matrix is not square with a whole number of blocks");
  const auto n = x.rows() / m;
  double best = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == k) continue;
      if (x.block(k * m, j * m, m, m).cwiseAbs().maxCoeff() > off_diagonal_tol)
        throw DimensionError("block_max_norm: only block-diagonal matrices are supported");
    }
    Eigen::JacobiSVD<Matrix> svd(x.block(k * m, k * m, m, m));
    best = std::max(best, svd.singularValues()(0));
  }
  return best;
}

struct SteadyStateMse {
  Vector per_node;
  double network = 0.0;
};

namespace detail {

inline Matrix noise_drive(const CombinationMatrices& cm, const Matrix& rv, Eigen::Index m) {
  const auto n = static_cast<Eigen::Index>(cm.size());
  Vector mu_diag(n * m);
  for (Eigen::Index k = 0; k < n; ++k) mu_diag.segment(k * m, m).setConstant(cm.mu[k]);
  const Matrix p2 = expand(cm.p2, m);
  // P2^T M R_v M P2
  return p2.transpose() * mu_diag.asDiagonal() * rv * mu_diag.asDiagonal() * p2;
}

inline void check_inputs(const CombinationMatrices& cm, const Matrix& d_inf, const Matrix& rv) {
  if (rv.rows() != d_inf.rows() || rv.cols() != d_inf.cols())
    throw DimensionError("R_v and D_inf must have the same size");
  if (cm.mu.size() != static_cast<Eigen::Index>(cm.size()))
    throw DimensionError("steady-state MSE needs one step-size per node");
}

}  // namespace detail

/// MSE_k = vec(P2^T M R_v M P2)^T (I - F)^{-1} t_k, t_k = vec(diag(e_k) (x) I_M),
/// network MSE with q/N, q = vec(I_MN). Dense F; use for MN <= kDenseLimit.
inline SteadyStateMse steady_state_mse_dense(const CombinationMatrices& cm, const Matrix& d_inf,
                                             const Matrix& rv) {
  detail::check_inputs(cm, d_inf, rv);
  const auto n = static_cast<Eigen::Index>(cm.size());
  const auto mn = d_inf.rows();
  const auto m = mn / n;
  const Matrix b = b_matrix(cm, d_inf);
  if (spectral_radius(b) >= 1.0) throw UnstableError("rho(F) >= 1: no steady state");

  Matrix i_minus_f = -f_matrix(b);
  i_minus_f.diagonal().array() += 1.0;
  Eigen::PartialPivLU<Matrix> lu(i_minus_f);
  if (lu.rcond() < std::sqrt(std::numeric_limits<double>::epsilon()))
    throw UnstableError("I - F is too ill-conditioned (rcond " + std::to_string(lu.rcond()) + ")");

  const Matrix drive = detail::noise_drive(cm, rv, m);
  const Vector y = Eigen::Map<const Vector>(drive.data(), drive.size());
  // x^T = y^T (I - F)^{-1}  <=>  (I - F)^T x = y
  const Vector x = lu.transpose().solve(y);

  SteadyStateMse out{Vector::Zero(n), 0.0};
  for (Eigen::Index k = 0; k < n; ++k) {
    double v = 0.0;
    for (Eigen::Index j = k * m; j < (k + 1) * m; ++j) v += x[j * mn + j];  // t_k picks diagonal entries
    out.per_node[k] = v;
  }
  double q = 0.0;
  for (Eigen::Index j = 0; j < mn; ++j) q += x[j * mn + j];
  out.network = q / static_cast<double>(n);
  return out;
}

/// Same quantity via the discrete Lyapunov equation X = B X B^T + P2^T M R_v M P2,
/// MSE_k = tr(X_kk), solved by Smith doubling. Needs O((MN)^3) per doubling.
inline SteadyStateMse steady_state_mse_lyapunov(const CombinationMatrices& cm, const Matrix& d_inf,
                                                const Matrix& rv, int max_doublings = 64) {
  detail::check_inputs(cm, d_inf, rv);
  const auto n = static_cast<Eigen::Index>(cm.size());
  const auto m = d_inf.rows() / n;
  Matrix a = b_matrix(cm, d_inf);
  if (spectral_radius(a) >= 1.0) throw UnstableError("rho(F) >= 1: no steady state");
  Matrix x = detail::noise_drive(cm, rv, m);
  for (int it = 0; it < max_doublings; ++it) {
    Matrix add = a * x * a.transpose();
    x += add;
    a = (a * a).eval();
    if (add.cwiseAbs().maxCoeff() <= 1e-17 * std::max(1e-300, x.cwiseAbs().maxCoeff()) &&
        a.cwiseAbs().maxCoeff() < 1e-8)
      break;
    if (it + 1 == max_doublings) throw ConvergenceError("Lyapunov doubling did not converge");
  }
  SteadyStateMse out{Vector::Zero(n), 0.0};
  for (Eigen::Index k = 0; k < n; ++k) out.per_node[k] = x.block(k * m, k * m, m, m).trace();
  out.network = out.per_node.mean();
  return out;
}

/// Dense F route for small networks, Lyapunov route above kDenseLimit.
inline SteadyStateMse steady_state_mse(const CombinationMatrices& cm, const Matrix& d_inf, const Matrix& rv) {
  if (static_cast<std::size_t>(d_inf.rows()) <= kDenseLimit) return steady_state_mse_dense(cm, d_inf, rv);
  return steady_state_mse_lyapunov(cm, d_inf, rv);
}

/// True iff rho(B) < 1, i.e. the mean error vanishes in steady state.
inline bool mean_error_dynamics_check(const CombinationMatrices& cm, const Matrix& d_inf) {
  return spectral_radius(b_matrix(cm, d_inf)) < 1.0;
}

/// R_v = E g g^T at w_ref with g_k = sum_l s[l][k] v_l, from the models'
/// closed-form noise covariances. Nodes' noises are independent, so block
/// (k, j) is sum_l s[l][k] s[l][j] Cov(v_l).
template <CostModel C>
Matrix rv_analytic(std::span<const C> costs, const Vector& w_ref, const Matrix& s) {
  const auto n = static_cast<Eigen::Index>(costs.size());
  const auto m = static_cast<Eigen::Index>(costs.front().dim());
  Matrix rv = Matrix::Zero(m * n, m * n);
  for (Eigen::Index l = 0; l < n; ++l) {
    const Matrix cov = costs[static_cast<std::size_t>(l)].noise_covariance(w_ref);
    for (Eigen::Index k = 0; k < n; ++k) {
      if (s(l, k) == 0.0) continue;
      for (Eigen::Index j = 0; j < n; ++j)
        if (s(l, j) != 0.0) rv.block(k * m, j * m, m, m) += s(l, k) * s(l, j) * cov;
    }
  }
  return rv;
}

struct RvEstimate {
  Matrix monte_carlo;
  Matrix analytic;
};

/// Monte Carlo estimate of R_v at w_ref (symmetrised), alongside the closed form.
template <CostModel C>
RvEstimate rv_from_model(std::span<const C> costs, const Vector& w_ref, const Matrix& s,
                         std::size_t n_samples, Rng& rng) {
  if (n_samples == 0) throw DimensionError("n_samples must be positive");
  const auto n = static_cast<Eigen::Index>(costs.size());
  const auto m = static_cast<Eigen::Index>(costs.front().dim());
  std::vector<Vector> mean_grad;
  for (const auto& c : costs) mean_grad.push_back(c.gradient(w_ref));
  Matrix acc = Matrix::Zero(m * n, m * n);
  Vector g(m * n);
  std::vector<Vector> v(static_cast<std::size_t>(n), Vector(m));
  for (std::size_t t = 0; t < n_samples; ++t) {
    for (Eigen::Index l = 0; l < n; ++l) {
      const auto& c = costs[static_cast<std::size_t>(l)];
      Vector& vl = v[static_cast<std::size_t>(l)];
      vl = -mean_grad[static_cast<std::size_t>(l)];
      c.add_stochastic_gradient(w_ref, c.draw(rng), 1.0, vl);
    }
    g.setZero();
    for (Eigen::Index k = 0; k < n; ++k)
      for (Eigen::Index l = 0; l < n; ++l)
        if (s(l, k) != 0.0) g.segment(k * m, m) += s(l, k) * v[static_cast<std::size_t>(l)];
    acc.selfadjointView<Eigen::Lower>().rankUpdate(g);
  }
  Matrix mc = acc.selfadjointView<Eigen::Lower>();
  mc /= static_cast<double>(n_samples);
  return {mc, rv_analytic(costs, w_ref, s)};
}

// ---------------------------------------------------------------------------

struct TheoryInputs {
  CombinationMatrices cm;            // with mu
  std::vector<Matrix> hessians_at_opt;
  Matrix rv;
  std::vector<HessianBounds> lambda_bounds;
  double alpha = 0.0;
  double sigma_v2 = 0.0;
};

struct TheoryReport {
  std::optional<std::vector<SigmaPair>> sigma;
  std::optional<Vector> mu_bounds;
  std::optional<Vector> gamma;
  std::optional<double> w_inf_bound;
  std::optional<double> w_inf_bound_small_step;
  bool step_sizes_within_bounds = false;
  double b_spectral_radius = 0.0;
  double f_spectral_radius = 0.0;
  bool f_radius_dense = false;  // false: reported as rho(B)^2
  std::optional<Vector> mse_per_node;
  std::optional<double> network_mse;
  bool stable = false;
  bool local_approximation = false;
  std::vector<std::string> notes;
};

/// Everything the closed-form analysis says about one configuration. Parts
/// whose assumptions fail are left empty and explained in `notes`.
inline TheoryReport evaluate(const TheoryInputs& in) {
  TheoryReport r;
  const auto n = static_cast<Eigen::Index>(in.cm.size());
  const double s1 = one_norm(in.cm.s);
  for (const auto& b : in.lambda_bounds)
    if (b.non_convex || b.empirical) r.local_approximation = true;

  try {
    auto sigma = sigma_minmax(in.cm.s, in.lambda_bounds);
    Vector bounds(n), gamma(n);
    bool within = true;
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& p = sigma[static_cast<std::size_t>(k)];
      bounds[k] = stable_stepsize_bound(p, in.alpha, s1);
      gamma[k] = gamma_k(in.cm.mu[k], p);
      within = within && in.cm.mu[k] > 0.0 && in.cm.mu[k] < bounds[k];
    }
    r.step_sizes_within_bounds = within;
    try {
      auto w = worst_node_mse_bound(in.cm.mu, gamma, in.alpha, in.sigma_v2, s1, sigma);
      r.w_inf_bound = w.bound;
      r.w_inf_bound_small_step = w.small_step;
    } catch (const UnstableError& e) {
      r.notes.emplace_back(e.what());
    }
    r.sigma = std::move(sigma);
    r.mu_bounds = bounds;
    r.gamma = gamma;
  } catch (const AssumptionViolation& e) {
    r.notes.emplace_back(e.what());
  }

  const Matrix d_inf = d_infinity(in.cm.s, in.hessians_at_opt);
  const Matrix b = b_matrix(in.cm, d_inf);
  r.b_spectral_radius = spectral_radius(b);
  if (static_cast<std::size_t>(b.rows()) <= kDenseRadiusLimit) {
    r.f_spectral_radius = spectral_radius(f_matrix(b));
    r.f_radius_dense = true;
  } else {
    r.f_spectral_radius = r.b_spectral_radius * r.b_spectral_radius;
  }
  r.stable = r.b_spectral_radius < 1.0;
  if (!r.stable) {
    r.notes.emplace_back("rho(B) >= 1: mean-square unstable, no steady-state prediction");
    return r;
  }
  try {
    auto mse = steady_state_mse(in.cm, d_inf, in.rv);
    r.mse_per_node = mse.per_node;
    r.network_mse = mse.network;
  } catch (const Error& e) {
    r.notes.emplace_back(e.what());
  }
  return r;
}

/// Gathers TheoryInputs from per-node cost models, linearised at `reference`.
template <CostModel C>
TheoryInputs inputs_from_costs(std::span<const C> costs, const CombinationMatrices& cm,
                               const Vector& reference) {
  TheoryInputs in;
  in.cm = cm;
  for (const auto& c : costs) {
    in.hessians_at_opt.push_back(c.hessian(reference));
    in.lambda_bounds.push_back(c.hessian_bounds());
    const auto nm = c.noise_moments(reference);
    in.alpha = std::max(in.alpha, nm.alpha);
    in.sigma_v2 = std::max(in.sigma_v2, nm.sigma_v2);
  }
  in.rv = rv_analytic(costs, reference, cm.s);
  return in;
}

}  // namespace diffusion::theory
