#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <boost/random/normal_distribution.hpp>

namespace diffusion {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched matrix/vector shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unresolvable experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// geometric_topology could not produce a connected graph.
class NotConnectedError : public Error {
 public:
  using Error::Error;
};

/// A modelling assumption (e.g. positive aggregate curvature) fails.
class AssumptionViolation : public Error {
 public:
  using Error::Error;
};

/// Mean-square unstable configuration (rho(F) >= 1, bound denominator <= 0).
class UnstableError : public Error {
 public:
  using Error::Error;
};

/// Combination weights violate their stochasticity constraints.
class InvalidWeights : public Error {
 public:
  using Error::Error;
};

/// An iterative solver ran out of iterations.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A recursion produced a non-finite value.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

// Random streams. One engine per (seed, trial, node, purpose) tuple; the
// tuple is mixed through std::seed_seq so neighbouring indices give
// unrelated streams.
using Rng = std::mt19937_64;

// Ziggurat sampler; several times faster than std::normal_distribution.
using Normal = boost::random::normal_distribution<double>;

enum class StreamPurpose : std::uint32_t { data = 1, topology = 2, init = 3, estimate = 4 };

inline Rng make_stream(std::uint64_t seed, std::uint64_t trial, std::uint64_t node,
                       StreamPurpose purpose = StreamPurpose::data) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32),
                    static_cast<std::uint32_t>(node), static_cast<std::uint32_t>(node >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return Rng(seq);
}

constexpr double kDbFloor = -200.0;

/// 10·log10(x); zero (or negative round-off) maps to the -200 dB floor, NaN stays NaN.
inline double to_db(double x) {
  if (std::isnan(x)) return x;
  if (!(x > 0.0)) return kDbFloor;
  double db = 10.0 * std::log10(x);
  return db < kDbFloor ? kDbFloor : db;
}

inline double from_db(double db) { return std::pow(10.0, db / 10.0); }

}  // namespace diffusion
