// Compare ATC diffusion against non-cooperative LMS on a small network.

#include <iostream>

#include "diffusion/harness.hpp"

int main() {
  using namespace diffusion;
  const auto cfg = parse_config(Json::parse(R"({
    "network": {"n_nodes": 8, "radius": 0.5, "seed": 1},
    "cost": {"model": "quadratic", "w_true": [1.0, -1.0, 0.5], "rows": 1, "noise_var": 1.0},
    "strategies": [
      {"name": "atc", "strategy": "atc", "a_weights": "averaging", "c_weights": "metropolis", "mu": 0.005},
      {"name": "noncoop", "strategy": "noncoop", "mu": 0.005}
    ],
    "run": {"horizon": 3000, "n_trials": 20, "seed": 1}
  })"));
  const auto r = run_experiment(cfg);
  for (const auto& s : r.strategies)
    std::cout << s.name << ": simulated " << s.steady.msd_db << " dB, theory "
              << (s.theory_msd ? to_db(*s.theory_msd) : NAN) << " dB\n";
}
