#pragma once

#include <algorithm>
#include <cstdint>
#include <queue>
#include <sstream>
#include <utility>
#include <vector>

#include "diffusion/common.hpp"

namespace diffusion {

/// Undirected network with self-loops; N_k = {l : adjacent(l, k)} includes k.
class Network {
 public:
  using Edge = std::pair<std::size_t, std::size_t>;

  Network() = default;

  /// Builds from an undirected edge list (0-based, self-loops implied).
  Network(std::size_t n_nodes, const std::vector<Edge>& edges,
          std::vector<Eigen::Vector2d> positions = {})
      : n_(n_nodes), adj_(n_nodes * n_nodes, 0), positions_(std::move(positions)) {
    if (n_nodes == 0) throw DimensionError("network needs at least one node");
    if (!positions_.empty() && positions_.size() != n_nodes)
      throw DimensionError("positions size does not match n_nodes");
    for (std::size_t k = 0; k < n_; ++k) set(k, k);
    for (const auto& [i, j] : edges) {
      if (i >= n_ || j >= n_) throw DimensionError("edge index out of range");
      set(i, j);
      set(j, i);
    }
  }

  std::size_t size() const noexcept { return n_; }
  bool adjacent(std::size_t l, std::size_t k) const { return adj_[l * n_ + k] != 0; }
  const std::vector<Eigen::Vector2d>& positions() const noexcept { return positions_; }
  bool has_positions() const noexcept { return !positions_.empty(); }

  /// |N_k|, counting k itself.
  std::size_t degree(std::size_t k) const {
    std::size_t d = 0;
    for (std::size_t l = 0; l < n_; ++l) d += adjacent(l, k) ? 1 : 0;
    return d;
  }

  std::vector<std::size_t> neighbors(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < n_; ++l)
      if (adjacent(l, k)) out.push_back(l);
    return out;
  }

  /// Edges with i < j; self-loops are not listed.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j)
        if (adjacent(i, j)) out.emplace_back(i, j);
    return out;
  }

  bool is_connected() const {
    if (n_ == 0) return false;
    std::vector<char> seen(n_, 0);
    std::queue<std::size_t> frontier;
    frontier.push(0);
    seen[0] = 1;
    std::size_t reached = 1;
    while (!frontier.empty()) {
      std::size_t k = frontier.front();
      frontier.pop();
      for (std::size_t l = 0; l < n_; ++l) {
        if (!seen[l] && adjacent(k, l)) {
          seen[l] = 1;
          ++reached;
          frontier.push(l);
        }
      }
    }
    return reached == n_;
  }

  friend bool operator==(const Network& a, const Network& b) {
    return a.n_ == b.n_ && a.adj_ == b.adj_ && a.positions_ == b.positions_;
  }

 private:
  void set(std::size_t l, std::size_t k) { adj_[l * n_ + k] = 1; }

  std::size_t n_ = 0;
  std::vector<std::uint8_t> adj_;
  std::vector<Eigen::Vector2d> positions_;
};

/// Random geometric graph on the unit square: uniform positions, an edge
/// whenever two nodes are within `radius`. Redraws until connected.
inline Network geometric_topology(std::size_t n_nodes, double radius, std::uint64_t seed,
                                  int max_retries = 100) {
  if (n_nodes == 0) throw DimensionError("n_nodes must be positive");
  if (!(radius > 0.0)) throw DimensionError("radius must be positive");
  Rng rng = make_stream(seed, 0, 0, StreamPurpose::topology);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<Eigen::Vector2d> pos(n_nodes);
    for (auto& p : pos) {
      double x = unit(rng);
      double y = unit(rng);
      p = Eigen::Vector2d(x, y);
    }
    std::vector<Network::Edge> edges;
    for (std::size_t i = 0; i < n_nodes; ++i)
      for (std::size_t j = i + 1; j < n_nodes; ++j)
        if ((pos[i] - pos[j]).norm() <= radius) edges.emplace_back(i, j);
    Network net(n_nodes, edges, std::move(pos));
    if (net.is_connected()) return net;
  }
  throw NotConnectedError("no connected geometric graph after " + std::to_string(max_retries) +
                          " draws (n=" + std::to_string(n_nodes) +
                          ", radius=" + std::to_string(radius) + ")");
}

/// a[l][k] = 1/|N_k| on the neighbourhood of k. Left-stochastic (columns sum to one).
inline Matrix averaging_weights(const Network& net) {
  const std::size_t n = net.size();
  Matrix a = Matrix::Zero(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double w = 1.0 / static_cast<double>(net.degree(k));
    for (std::size_t l = 0; l < n; ++l)
      if (net.adjacent(l, k)) a(l, k) = w;
  }
  return a;
}

/// a[l][k] = 1/max(|N_k|, |N_l|) for neighbours l != k, remainder on the
/// diagonal. Symmetric and doubly stochastic.
inline Matrix metropolis_weights(const Network& net) {
  const std::size_t n = net.size();
  std::vector<double> deg(n);
  for (std::size_t k = 0; k < n; ++k) deg[k] = static_cast<double>(net.degree(k));
  Matrix a = Matrix::Zero(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    double off = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      if (l == k || !net.adjacent(l, k)) continue;
      a(l, k) = 1.0 / std::max(deg[k], deg[l]);
      off += a(l, k);
    }
    a(k, k) = 1.0 - off;
  }
  return a;
}

/// The (P1, P2, S) triple of the general diffusion recursion plus per-node
/// step-sizes. Entry [l][k] is the weight node k gives to node l.
struct CombinationMatrices {
  Matrix p1;
  Matrix p2;
  Matrix s;
  Vector mu;  // empty until a step-size is attached

  std::size_t size() const noexcept { return static_cast<std::size_t>(p1.rows()); }
};

struct Violation {
  std::string matrix;  // "p1", "p2", "s", "mu"
  std::string kind;    // "column_sum", "row_sum", "sparsity", "negative", "nonpositive"
  std::size_t row = 0;
  std::size_t col = 0;
  double residual = 0.0;

  std::string describe() const {
    std::ostringstream os;
    os << matrix << ' ' << kind << " at [" << row << "][" << col << "] residual " << residual;
    return os.str();
  }
};

constexpr double kStochasticTol = 1e-12;

namespace detail {

inline void check_square(const Matrix& m, std::size_t n, const char* name) {
  if (static_cast<std::size_t>(m.rows()) != n || static_cast<std::size_t>(m.cols()) != n)
    throw DimensionError(std::string(name) + " must be " + std::to_string(n) + "x" +
                         std::to_string(n));
}

// Column sums of p1/p2 (P^T 1 = 1), row sums of s (S 1 = 1).
inline void check_sums(const Matrix& m, const char* name, bool columns, double tol,
                       std::vector<Violation>& out) {
  const auto n = static_cast<std::size_t>(m.rows());
  for (std::size_t i = 0; i < n; ++i) {
    double sum = columns ? m.col(static_cast<Eigen::Index>(i)).sum()
                         : m.row(static_cast<Eigen::Index>(i)).sum();
    double residual = std::abs(sum - 1.0);
    if (!(residual <= tol))
      out.push_back({name, columns ? "column_sum" : "row_sum", columns ? 0 : i, columns ? i : 0,
                     residual});
  }
}

inline void check_entries(const Matrix& m, const char* name, const Network* net, double tol,
                          std::vector<Violation>& out) {
  const auto n = static_cast<std::size_t>(m.rows());
  for (std::size_t l = 0; l < n; ++l) {
    for (std::size_t k = 0; k < n; ++k) {
      double v = m(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k));
      if (v < -tol) out.push_back({name, "negative", l, k, -v});
      if (net && !net->adjacent(l, k) && std::abs(v) > 0.0)
        out.push_back({name, "sparsity", l, k, std::abs(v)});
    }
  }
}

}  // namespace detail

/// Lists every violated constraint; empty means the triple is admissible on `net`.
inline std::vector<Violation> validate(const CombinationMatrices& cm, const Network& net,
                                       double tol = kStochasticTol) {
  const std::size_t n = net.size();
  detail::check_square(cm.p1, n, "p1");
  detail::check_square(cm.p2, n, "p2");
  detail::check_square(cm.s, n, "s");
  if (cm.mu.size() != 0 && static_cast<std::size_t>(cm.mu.size()) != n)
    throw DimensionError("mu must have one entry per node");

  std::vector<Violation> out;
  detail::check_entries(cm.p1, "p1", &net, tol, out);
  detail::check_entries(cm.p2, "p2", &net, tol, out);
  detail::check_entries(cm.s, "s", &net, tol, out);
  detail::check_sums(cm.p1, "p1", true, tol, out);
  detail::check_sums(cm.p2, "p2", true, tol, out);
  detail::check_sums(cm.s, "s", false, tol, out);
  for (Eigen::Index k = 0; k < cm.mu.size(); ++k)
    if (!(cm.mu[k] > 0.0))
      out.push_back({"mu", "nonpositive", 0, static_cast<std::size_t>(k), -cm.mu[k]});
  return out;
}

enum class Cooperation { atc, cta, noncooperative };

/// Maps a cooperation mode onto (P1, P2, S): ATC (I, A, C), CTA (A, I, C),
/// non-cooperative (I, I, I).
inline CombinationMatrices strategy_matrices(Cooperation kind, const Matrix& a, const Matrix& c) {
  const auto n = a.rows();
  if (kind == Cooperation::noncooperative) {
    const Matrix id = Matrix::Identity(n, n);
    return {id, id, id, {}};
  }
  detail::check_square(a, static_cast<std::size_t>(n), "a");
  detail::check_square(c, static_cast<std::size_t>(n), "c");
  std::vector<Violation> bad;
  detail::check_entries(a, "a", nullptr, kStochasticTol, bad);
  detail::check_entries(c, "c", nullptr, kStochasticTol, bad);
  detail::check_sums(a, "a", true, kStochasticTol, bad);
  detail::check_sums(c, "c", false, kStochasticTol, bad);
  if (!bad.empty()) throw InvalidWeights("invalid combination weights: " + bad.front().describe());
  const Matrix id = Matrix::Identity(n, n);
  if (kind == Cooperation::atc) return {id, a, c, {}};
  return {a, id, c, {}};
}

}  // namespace diffusion
