#include <gtest/gtest.h>

#include "diffusion/theory.hpp"
#include "oracles.hpp"

using namespace diffusion;
using namespace diffusion::theory;

namespace {

std::vector<std::vector<int>> adjacency_of(const Network& net) {
  std::vector<std::vector<int>> adj(net.size(), std::vector<int>(net.size(), 0));
  for (std::size_t l = 0; l < net.size(); ++l)
    for (std::size_t k = 0; k < net.size(); ++k) adj[l][k] = net.adjacent(l, k) ? 1 : 0;
  return adj;
}

// Random stable diffusion instance with SPD Hessians and a small step.
struct Instance {
  CombinationMatrices cm;
  std::vector<Matrix> hessians;
  std::vector<HessianBounds> bounds;
  Matrix d_inf;
};

Instance random_instance(std::uint64_t seed, std::size_t n, Eigen::Index m, double mu_scale) {
  std::mt19937_64 rng(seed);
  const Network net = geometric_topology(n, 0.6, seed);
  const auto adj = adjacency_of(net);
  Instance in;
  const Matrix a = oracle::random_left_stochastic(adj, rng);
  const Matrix c = oracle::random_right_stochastic(adj, rng);
  const int kind = static_cast<int>(seed % 3);
  in.cm = strategy_matrices(kind == 0 ? Cooperation::atc : kind == 1 ? Cooperation::cta : Cooperation::noncooperative,
                            a, c);
  for (std::size_t k = 0; k < n; ++k) {
    in.hessians.push_back(oracle::random_spd(m, 0.5, 3.0, rng));
    Eigen::SelfAdjointEigenSolver<Matrix> es(in.hessians.back());
    in.bounds.push_back({es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff(), false, false});
  }
  std::uniform_real_distribution<double> u(0.5, 1.0);
  in.cm.mu = Vector(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) in.cm.mu[static_cast<Eigen::Index>(k)] = mu_scale * u(rng);
  in.d_inf = d_infinity(in.cm.s, in.hessians);
  return in;
}

Matrix random_psd(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix x(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = g(rng);
  return x * x.transpose() / static_cast<double>(d);
}

// Plain fixed-point iteration of the variance recursion X <- B X B^T + Y.
Vector fixed_point_mse(const Matrix& b, const Matrix& y, Eigen::Index n, Eigen::Index m) {
  Matrix x = Matrix::Zero(b.rows(), b.cols());
  for (int it = 0; it < 200000; ++it) {
    const Matrix next = b * x * b.transpose() + y;
    const double change = (next - x).cwiseAbs().maxCoeff();
    x = next;
    if (change < 1e-16 * std::max(1.0, x.cwiseAbs().maxCoeff())) break;
  }
  Vector out(n);
  for (Eigen::Index k = 0; k < n; ++k) out[k] = x.block(k * m, k * m, m, m).trace();
  return out;
}

}  // namespace

TEST(Sigma, Examples) {
  const std::vector<HessianBounds> b{{1.0, 2.0, false, false}, {1.0, 2.0, false, false}};
  const auto id = sigma_minmax(Matrix::Identity(2, 2), b);
  EXPECT_DOUBLE_EQ(id[0].min, 1.0);
  EXPECT_DOUBLE_EQ(id[1].max, 2.0);
  const std::vector<HessianBounds> b2{{1.0, 2.0, false, false}, {1.0, 4.0, false, false}};
  const auto avg = sigma_minmax(Matrix::Constant(2, 2, 0.5), b2);
  EXPECT_DOUBLE_EQ(avg[0].max, 3.0);
  EXPECT_DOUBLE_EQ(avg[1].max, 3.0);
}

TEST(Sigma, MetropolisMatchesDirectSum) {
  const Network net = geometric_topology(7, 0.5, 3);
  const Matrix s = metropolis_weights(net);
  std::vector<HessianBounds> b;
  for (int k = 0; k < 7; ++k) b.push_back({0.5 + k, 1.0 + 2.0 * k, false, false});
  const auto sig = sigma_minmax(s, b);
  for (int k = 0; k < 7; ++k) {
    double lo = 0.0, hi = 0.0;
    for (int l = 0; l < 7; ++l) {
      lo += s(l, k) * (0.5 + l);
      hi += s(l, k) * (1.0 + 2.0 * l);
    }
    EXPECT_NEAR(sig[static_cast<std::size_t>(k)].min, lo, 1e-14);
    EXPECT_NEAR(sig[static_cast<std::size_t>(k)].max, hi, 1e-14);
  }
}

TEST(Sigma, NonPositiveCurvatureNamesNode) {
  const std::vector<HessianBounds> b{{1.0, 2.0, false, false}, {-1.0, 2.0, true, true}};
  try {
    sigma_minmax(Matrix::Identity(2, 2), b);
    FAIL();
  } catch (const AssumptionViolation& e) {
    EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos);
  }
}

TEST(StepBound, Examples) {
  EXPECT_DOUBLE_EQ(stable_stepsize_bound({1.0, 4.0}, 0.0, 1.0), 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(stable_stepsize_bound({2.0, 2.0}, 0.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(stable_stepsize_bound({1.0, 4.0}, 3.0, 1.0), 8.0 / 19.0);
}

TEST(Gamma, Examples) {
  EXPECT_DOUBLE_EQ(gamma_k(0.0, {1.0, 3.0}), 1.0);
  EXPECT_DOUBLE_EQ(gamma_k(0.5, {2.0, 2.0}), 0.0);
  EXPECT_NEAR(gamma_k(0.001, {1.0, 3.0}), 0.999, 1e-15);
  EXPECT_NEAR(gamma_k(1e-4, {2.0, 5.0}), 1.0 - 1e-4 * 2.0, 1e-15);
}

TEST(WorstNode, Examples) {
  const Vector mu = Vector::Constant(1, 0.01), gamma = Vector::Constant(1, 0.99);
  EXPECT_DOUBLE_EQ(worst_node_mse_bound(mu, gamma, 0.0, 0.0, 1.0).bound, 0.0);
  EXPECT_NEAR(worst_node_mse_bound(mu, gamma, 0.0, 1.0, 1.0).bound, 1e-4 / (1.0 - 0.9801), 1e-15);
  EXPECT_NEAR(worst_node_mse_bound(mu, gamma, 0.0, 1.0, 1.0).bound, 5.025e-3, 1e-6);
  const double one = worst_node_mse_bound(mu, gamma, 0.1, 1.0, 1.0).bound;
  EXPECT_NEAR(worst_node_mse_bound(mu, gamma, 0.1, 3.5, 1.0).bound, 3.5 * one, 1e-15);
  EXPECT_THROW(worst_node_mse_bound(mu, Vector::Constant(1, 1.0), 0.0, 1.0, 1.0), UnstableError);
  const std::vector<SigmaPair> sig{{1.0, 1.0}};
  EXPECT_NEAR(*worst_node_mse_bound(mu, gamma, 0.0, 1.0, 1.0, sig).small_step, 1e-4 / (2.0 * 0.01), 1e-15);
}

TEST(DInfinity, Examples) {
  std::mt19937_64 rng(1);
  std::vector<Matrix> h;
  for (int k = 0; k < 3; ++k) h.push_back(oracle::random_spd(2, 0.5, 2.0, rng));
  const Matrix di = d_infinity(Matrix::Identity(3, 3), h);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(Matrix(di.block(2 * k, 2 * k, 2, 2)), h[static_cast<std::size_t>(k)]);

  const Network net(3, {{0, 1}, {1, 2}});
  const Matrix s = metropolis_weights(net);
  const std::vector<Matrix> same(3, h[0]);
  const Matrix ds = d_infinity(s, same);
  for (int k = 0; k < 3; ++k) EXPECT_LE((Matrix(ds.block(2 * k, 2 * k, 2, 2)) - h[0]).norm(), 1e-14);

  const Matrix dm = d_infinity(s, h);
  for (int k = 0; k < 3; ++k) {
    Matrix expect = Matrix::Zero(2, 2);
    for (int l = 0; l < 3; ++l) expect += s(l, k) * h[static_cast<std::size_t>(l)];
    EXPECT_LE((Matrix(dm.block(2 * k, 2 * k, 2, 2)) - expect).norm(), 1e-14);
  }
  EXPECT_EQ(Matrix(dm.block(0, 2, 2, 2)), Matrix::Zero(2, 2));
}

TEST(BMatrix, ScalarCase) {
  const Matrix one = Matrix::Identity(1, 1);
  CombinationMatrices cm{one, one, one, Vector::Constant(1, 0.1)};
  const Matrix b = b_matrix(cm, Matrix::Constant(1, 1, 2.0));
  EXPECT_NEAR(b(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(f_matrix(b)(0, 0), 0.64, 1e-15);
  EXPECT_TRUE(mean_error_dynamics_check(cm, Matrix::Constant(1, 1, 2.0)));
  cm.mu[0] = 1.0;  // 2 / lambda
  EXPECT_FALSE(mean_error_dynamics_check(cm, Matrix::Constant(1, 1, 2.0)));
}

TEST(BMatrix, TranspositionConventionOnTwoNodes) {
  // B = P2^T (I - M D) P1^T written out for M = 1.
  const Matrix a = (Matrix(2, 2) << 0.7, 0.4, 0.3, 0.6).finished();
  const Matrix id = Matrix::Identity(2, 2);
  CombinationMatrices cm{id, a, id, (Vector(2) << 0.1, 0.2).finished()};
  const Matrix d = (Matrix(2, 2) << 2.0, 0.0, 0.0, 3.0).finished();
  const Matrix b = b_matrix(cm, d);
  Matrix expect(2, 2);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j) expect(k, j) = a(j, k) * (1.0 - cm.mu[j] * d(j, j));
  EXPECT_LE((b - expect).norm(), 1e-15);
  EXPECT_NEAR(spectral_radius(b), oracle::spectral_radius_2x2(expect), 1e-14);
}

TEST(BMatrix, KroneckerSpectralIdentity) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto in = random_instance(seed, 4, 2, 0.05);
    const Matrix b = b_matrix(in.cm, in.d_inf);
    const double rb = spectral_radius(b);
    EXPECT_NEAR(spectral_radius(f_matrix(b)), rb * rb, 1e-10);
  }
}

TEST(BMatrix, RadiusBoundedByWorstContraction) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto in = random_instance(100 + seed, 5, 2, 0.02);
    const auto sig = sigma_minmax(in.cm.s, in.bounds);
    double gmax = 0.0;
    for (Eigen::Index k = 0; k < 5; ++k) gmax = std::max(gmax, gamma_k(in.cm.mu[k], sig[static_cast<std::size_t>(k)]));
    EXPECT_LE(spectral_radius(b_matrix(in.cm, in.d_inf)), gmax + 1e-12) << "seed " << seed;
    EXPECT_TRUE(mean_error_dynamics_check(in.cm, in.d_inf));
  }
}

TEST(BlockMaxNorm, Examples) {
  EXPECT_DOUBLE_EQ(block_max_norm(Vector(Vector::Constant(6, 1.0 / std::sqrt(2.0))), 2), 1.0);
  Matrix x = Matrix::Zero(6, 6);
  x.block(0, 0, 2, 2) = Vector::Constant(2, 1.0).asDiagonal();
  x.block(2, 2, 2, 2) = (Vector(2) << 3.0, 0.5).finished().asDiagonal();
  x.block(4, 4, 2, 2) = (Vector(2) << -2.0, 1.0).finished().asDiagonal();
  EXPECT_NEAR(block_max_norm(x, 2), 3.0, 1e-14);
  x(0, 5) = 0.1;
  EXPECT_THROW(block_max_norm(x, 2), DimensionError);
  EXPECT_THROW(block_max_norm(Vector(Vector::Ones(5)), 2), DimensionError);
}

TEST(BlockMaxNorm, InducedNormNeverExceedsAndIsAttained) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Index m = 3, n = 4;
    Matrix x = Matrix::Zero(m * n, m * n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Matrix r(m, m);
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) r(i, j) = g(rng);
      x.block(k * m, k * m, m, m) = r + r.transpose();
    }
    const double norm = block_max_norm(x, m);
    for (int s = 0; s < 10000; ++s) {
      Vector v(m * n);
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
      EXPECT_LE(block_max_norm(Vector(x * v), m) / block_max_norm(v, m), norm * (1.0 + 1e-12));
    }
  }
}

TEST(SteadyState, ScalarClosedForm) {
  const Matrix one = Matrix::Identity(1, 1);
  CombinationMatrices cm{one, one, one, Vector::Constant(1, 0.1)};
  const double r = 2.5;
  const auto mse = steady_state_mse(cm, Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, r));
  EXPECT_NEAR(mse.network, r / 36.0, 1e-15);
  EXPECT_NEAR(mse.per_node[0], r / 36.0, 1e-15);
  const auto zero = steady_state_mse(cm, Matrix::Constant(1, 1, 2.0), Matrix::Zero(1, 1));
  EXPECT_EQ(zero.network, 0.0);
}

TEST(SteadyState, DenseLyapunovAndFixedPointAgree) {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto in = random_instance(200 + seed, 4, 2, 0.05);
    const Matrix rv = random_psd(8, rng);
    const auto dense = steady_state_mse_dense(in.cm, in.d_inf, rv);
    const auto lyap = steady_state_mse_lyapunov(in.cm, in.d_inf, rv);
    const Matrix b = b_matrix(in.cm, in.d_inf);
    Vector mu_diag(8);
    for (Eigen::Index k = 0; k < 4; ++k) mu_diag.segment(2 * k, 2).setConstant(in.cm.mu[k]);
    const Matrix p2 = Eigen::kroneckerProduct(in.cm.p2, Matrix::Identity(2, 2)).eval();
    const Matrix y = p2.transpose() * mu_diag.asDiagonal() * rv * mu_diag.asDiagonal() * p2;
    const Vector fp = fixed_point_mse(b, y, 4, 2);
    for (Eigen::Index k = 0; k < 4; ++k) {
      EXPECT_NEAR(dense.per_node[k], fp[k], 1e-9 * fp[k]);
      EXPECT_NEAR(lyap.per_node[k], fp[k], 1e-9 * fp[k]);
    }
    EXPECT_NEAR(dense.per_node.mean(), dense.network, 1e-12 * dense.network);
  }
}

TEST(SteadyState, MonotoneInNoiseDiagonal) {
  std::mt19937_64 rng(6);
  const auto in = random_instance(300, 4, 2, 0.05);
  Matrix rv = random_psd(8, rng);
  const double base = steady_state_mse(in.cm, in.d_inf, rv).network;
  for (Eigen::Index i = 0; i < 8; ++i) {
    Matrix bumped = rv;
    bumped(i, i) += 0.1;
    EXPECT_GE(steady_state_mse(in.cm, in.d_inf, bumped).network, base);
  }
}

TEST(SteadyState, UnstableThrows) {
  const Matrix one = Matrix::Identity(1, 1);
  CombinationMatrices cm{one, one, one, Vector::Constant(1, 1.5)};
  EXPECT_THROW(steady_state_mse(cm, Matrix::Constant(1, 1, 2.0), one), UnstableError);
}

TEST(SteadyState, NonCooperativeQuadraticClosedForm) {
  // Each node is an independent LMS filter: MSE_k = mu^2 4 s^2 K r M / (1 - (1 - 2 mu K r)^2).
  const Vector w_true = Vector::LinSpaced(3, -1.0, 1.0);
  std::vector<QuadraticCost> costs;
  for (int k = 0; k < 4; ++k) costs.emplace_back(w_true, 2, 0.5 + 0.1 * k, 1.0 + 0.2 * k);
  const Matrix id = Matrix::Identity(4, 4);
  CombinationMatrices cm{id, id, id, Vector::Constant(4, 0.01)};
  const auto in = inputs_from_costs(std::span<const QuadraticCost>(costs), cm, w_true);
  const auto rep = evaluate(in);
  ASSERT_TRUE(rep.mse_per_node.has_value());
  for (int k = 0; k < 4; ++k) {
    const double kr = 2.0 * (1.0 + 0.2 * k);
    const double expect = 1e-4 * 4.0 * (0.5 + 0.1 * k) * kr * 3.0 / (1.0 - std::pow(1.0 - 0.02 * kr, 2));
    EXPECT_NEAR((*rep.mse_per_node)[k], expect, 1e-12 * expect);
  }
  EXPECT_TRUE(rep.stable);
  EXPECT_TRUE(rep.f_radius_dense);
  EXPECT_NEAR(rep.f_spectral_radius, rep.b_spectral_radius * rep.b_spectral_radius, 1e-10);
}

TEST(NoiseCovariance, NoiselessAtOptimumIsZero) {
  const Vector w_true = Vector::Ones(2);
  std::vector<QuadraticCost> costs(3, QuadraticCost(w_true, 2, 0.0, 1.0));
  Rng rng = make_stream(1, 0, 0);
  const auto est = rv_from_model(std::span<const QuadraticCost>(costs), w_true, Matrix::Identity(3, 3), 100, rng);
  EXPECT_LE(est.monte_carlo.cwiseAbs().maxCoeff(), 1e-20);
  EXPECT_EQ(est.analytic, Matrix::Zero(6, 6));
}

TEST(NoiseCovariance, MonteCarloMatchesAnalytic) {
  const Vector w_true = Vector::LinSpaced(2, -0.5, 0.5);
  std::vector<QuadraticCost> costs;
  for (int k = 0; k < 3; ++k) costs.emplace_back(w_true, 2, 1.0, 0.5 + 0.5 * k);
  const Network net(3, {{0, 1}, {1, 2}});
  const Rng seed_rng = make_stream(2, 0, 0);
  for (const Matrix& s : {Matrix(Matrix::Identity(3, 3)), metropolis_weights(net)}) {
    Rng rng = seed_rng;
    const auto est = rv_from_model(std::span<const QuadraticCost>(costs), w_true, s, 200000, rng);
    // S = I: blocks 4 s_z^2 K r I on the diagonal, zero elsewhere
    if (s.isIdentity()) {
      for (int k = 0; k < 3; ++k)
        EXPECT_LE((Matrix(est.analytic.block(2 * k, 2 * k, 2, 2)) - 4.0 * 2.0 * (0.5 + 0.5 * k) * Matrix::Identity(2, 2)).norm(), 1e-12);
      EXPECT_EQ(Matrix(est.analytic.block(0, 2, 2, 2)), Matrix::Zero(2, 2));
    }
    // entrywise standard error of a product of Gaussians is about sqrt(2) * scale / sqrt(n)
    const double scale = est.analytic.diagonal().maxCoeff();
    EXPECT_LE((est.monte_carlo - est.analytic).cwiseAbs().maxCoeff(), 3.0 * std::sqrt(3.0) * scale / std::sqrt(200000.0));
    Eigen::SelfAdjointEigenSolver<Matrix> es(est.monte_carlo);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    EXPECT_EQ(est.monte_carlo, est.monte_carlo.transpose());
  }
}

TEST(Evaluate, ReportsFlagsForNonConvexModels) {
  std::vector<LocalizationCost> costs;
  for (int k = 0; k < 4; ++k)
    costs.emplace_back(Eigen::Vector2d(std::cos(k * 1.5), std::sin(k * 1.5)) * 2.0, Eigen::Vector2d::Zero(), 1.0);
  const Network net = geometric_topology(4, 2.0, 1);
  auto cm = strategy_matrices(Cooperation::atc, averaging_weights(net), Matrix::Identity(4, 4));
  cm.mu = Vector::Constant(4, 0.0025);
  const auto rep = evaluate(inputs_from_costs(std::span<const LocalizationCost>(costs), cm, Vector::Zero(2)));
  EXPECT_TRUE(rep.local_approximation);
  EXPECT_FALSE(rep.sigma.has_value());
  EXPECT_FALSE(rep.notes.empty());
  EXPECT_TRUE(rep.stable);
  EXPECT_TRUE(rep.network_mse.has_value());
}
