#pragma once

#include <cstdint>
#include <vector>

#include "hasmm/episode.hpp"
#include "hasmm/rng.hpp"

namespace hasmm {

struct GenerateOptions {
  double missing_rate = 0.0;  // per-entry thinning probability
  int max_transitions = 10000;
  bool with_truth = true;
};

Trajectory sample_trajectory(const ParameterSet& p, Rng& rng, int max_transitions = 10000);

// Poisson(zeta) observation times on [0, censor_time].
std::vector<double> sample_observation_times(double zeta, double censor_time, Rng& rng);

Episode generate_episode(const ParameterSet& p, Rng& rng, const GenerateOptions& opt, const std::string& id);

// Episode d uses a sub-seed derived from (seed, d), so output does not depend on `threads`.
std::vector<Episode> generate(const ParameterSet& p, int count, std::uint64_t seed, const GenerateOptions& opt,
                              int threads = 1);

}  // namespace hasmm
