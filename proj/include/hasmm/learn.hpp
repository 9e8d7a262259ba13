#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hasmm/sampling.hpp"

namespace hasmm {

struct LearnConfig {
  int samples = 50;       // trajectories per episode (G)
  int max_iter = 30;
  double epsilon = 1e-4;  // stop when no parameter moves by more than this (relative)
  std::uint64_t seed = 1;
  bool ess_refresh = false;  // redraw trajectories under the current iterate when ESS < G/2
  double entry_step = 0.5;   // hours per cell of the entry pass
  int emission_window = 24;
  double kernel_step = 0.02;
  bool track_loglik = true;  // evaluate the observed-data log-likelihood at every iterate
  int threads = 1;
};

// Trajectories drawn for every episode together with their log density under the parameters
// they were drawn from.
class SampleSet {
 public:
  SampleSet(const std::vector<Episode>& episodes, std::vector<std::vector<Trajectory>> paths,
            const ParameterSet& base);

  int episodes() const { return static_cast<int>(paths_.size()); }
  int samples(int d) const { return static_cast<int>(paths_[d].size()); }
  const Trajectory& path(int d, int g) const { return paths_[d][g]; }

  // Self-normalized importance weights of `p` relative to the base parameters (mean 1 per episode).
  std::vector<std::vector<double>> weights(const ParameterSet& p) const;
  // Monte Carlo estimate of the expected complete log-likelihood of `p` under `weights`.
  double objective(const ParameterSet& p, const std::vector<std::vector<double>>& weights) const;
  double min_ess(const std::vector<std::vector<double>>& weights) const;

  // Visit of one path: state, sojourn, successor (-1 for the last), segment id (-1 if empty).
  struct Visit {
    int state;
    double sojourn;
    int next;
    int segment;
  };
  struct SegmentKey {
    int state, episode, first, last;
  };
  const std::vector<Visit>& visits(int d, int g) const { return visits_[d][g]; }
  const std::vector<SegmentKey>& segments() const { return keys_; }
  const Segment& segment(int k) const { return segs_[k]; }

  // log density of every distinct segment under `p`.
  std::vector<double> segment_values(const ParameterSet& p) const;
  double path_log_density(const ParameterSet& p, int d, int g, const std::vector<double>& seg_values) const;

 private:
  std::vector<std::vector<Trajectory>> paths_;
  std::vector<std::vector<std::vector<Visit>>> visits_;
  std::vector<SegmentKey> keys_;
  std::vector<Segment> segs_;
  std::vector<std::vector<double>> base_;
};

struct MStepReport {
  double before = 0.0;  // objective at the previous iterate
  double after = 0.0;
  std::vector<std::string> reverted;  // blocks that failed to improve and kept their old values
};

// One generalized M-step: each block (initial, sojourn, transition, emission per state) is
// maximized in turn and kept only if the objective does not decrease.
ParameterSet m_step(const SampleSet& samples, const std::vector<std::vector<double>>& weights,
                    const ParameterSet& prev, MStepReport* report = nullptr);

struct IterationRecord {
  int iter = 0;
  double objective = 0.0;  // Q-hat at the new iterate
  double objective_prev = 0.0;  // Q-hat at the previous iterate, same weights
  double loglik = 0.0;
  double min_ess = 0.0;
  double wall_time = 0.0;
  bool refreshed = false;
  std::vector<std::string> reverted;
};

struct LearnResult {
  ParameterSet params;
  ParameterSet initial;
  std::vector<IterationRecord> trace;
  double loglik = 0.0;
  bool converged = false;
};

// log p(y, censor time, label) summed over episodes, from the entry pass.
double observed_log_likelihood(const ParameterSet& p, const std::vector<Episode>& episodes, const LearnConfig& cfg);

// Draws cfg.samples trajectories for every episode from the posterior under p.
std::vector<std::vector<Trajectory>> draw_paths(const ParameterSet& p, const std::vector<Episode>& episodes,
                                                const LearnConfig& cfg, std::uint64_t stream);

// Data-driven starting point: k-means on observations seeds the emission means.
ParameterSet initial_guess(const std::vector<Episode>& episodes, int n_states, const LearnConfig& cfg);

LearnResult ffbs_mcem(const std::vector<Episode>& episodes, const ParameterSet& init, const LearnConfig& cfg);

// Transient states sorted by their probability of ending in the catastrophic state.
ParameterSet canonical_relabel(const ParameterSet& p);
// Applies a state permutation: new state k is old state perm[k].
ParameterSet permute_states(const ParameterSet& p, const std::vector<int>& perm);

int parameter_count(const ParameterSet& p);
double bic_score(double loglik, int params, long observations);

struct BicCandidate {
  int n_states = 0;
  double loglik = 0.0;
  double bic = 0.0;
  bool failed = false;
  std::string error;
  ParameterSet params;
};

struct BicResult {
  int n_states = 0;
  ParameterSet params;
  std::vector<BicCandidate> candidates;
};

// Fits every candidate N from its own k-means start; the lowest BIC wins, ties to smaller N.
BicResult bic_select(const std::vector<Episode>& episodes, const std::vector<int>& candidates, const LearnConfig& cfg);

// zeta = total observations / total censored time.
double estimate_intensity(const std::vector<Episode>& episodes);

}  // namespace hasmm
