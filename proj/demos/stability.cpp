// Closed-form stability and steady-state analysis for a range of step sizes.

#include <iostream>

#include "diffusion/theory.hpp"

int main() {
  using namespace diffusion;
  const Network net = geometric_topology(6, 0.6, 4);
  std::vector<QuadraticCost> costs;
  for (std::size_t k = 0; k < net.size(); ++k)
    costs.emplace_back(Vector::Ones(2), 1, 1.0, 0.5 + 0.2 * static_cast<double>(k));
  for (double mu : {0.01, 0.1, 0.3, 0.6}) {
    auto cm = strategy_matrices(Cooperation::atc, metropolis_weights(net), Matrix::Identity(6, 6));
    cm.mu = Vector::Constant(6, mu);
    const auto rep = theory::evaluate(theory::inputs_from_costs(std::span<const QuadraticCost>(costs), cm, Vector::Ones(2)));
    std::cout << "mu=" << mu << " rho(B)=" << rep.b_spectral_radius << " stable=" << rep.stable;
    if (rep.network_mse) std::cout << " msd=" << to_db(*rep.network_mse) << " dB";
    std::cout << '\n';
  }
}
