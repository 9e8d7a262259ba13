#pragma once

#include <vector>

#include <Eigen/Dense>

#include "hasmm/episode.hpp"
#include "hasmm/rng.hpp"

namespace hasmm {

// Gamma sojourn of `state` conditioned on s < s_bar. Rejection while the acceptance rate
// V(s_bar) is at least 0.01, inverse CDF below that.
double tr_sampler(const ParameterSet& p, int state, double s_bar, Rng& rng);

// Gamma sojourn of `state` conditioned on lo <= s < hi, by inverse CDF.
double truncated_gamma(const ParameterSet& p, int state, double lo, double hi, Rng& rng);

struct BarDraw {
  int state = -1;
  double duration = 0.0;
  long proposals = 0;
};

// Joint draw of (previous state u, its sojourn w < s_bar) given the next state, with density
// proportional to alpha_u * v_u(w) / V_u(s_bar) * g_{u,next}(w). Throws after `max_proposals`
// rejections in a row.
BarDraw bar_sampler(const Eigen::VectorXd& alpha, const ParameterSet& p, int next, double s_bar, Rng& rng,
                    long max_proposals = 100000);

struct EntryPassOptions {
  double step = 0.5;  // hours per cell of the entry-time grid
  int emission_window = 24;
};

// Forward pass over entry times for one episode: rho_j(t) is the density of entering state j
// at time t jointly with the observations before t, held piecewise constant on a grid that is
// also split at every observation time. The initial visit is a point mass at t = 0.
class EntryPass {
 public:
  EntryPass(const ParameterSet& p, const Kernel& kernel, const Episode& e, const EntryPassOptions& opt = {});
  // Without observations the pass only depends on the horizon.
  EntryPass(const ParameterSet& p, const Kernel& kernel, double horizon, const EntryPassOptions& opt = {});

  const ParameterSet& params() const { return *p_; }
  double horizon() const { return horizon_; }
  int observations() const { return static_cast<int>(times_.size()); }

  // log p(y, censor time, label): absorption into `label` with sojourn ending at censor_time.
  double log_likelihood(double censor_time, int label) const;

  // Log density of observations [a, b) under state j.
  double log_emission(int j, int a, int b) const { return caches_[j].log_density(a, b); }
  // Observations strictly before t.
  int count_before(double t) const;

  // Posterior probability that the visit of `prev` preceding an entry into `next` at time tau is
  // the initial one, summed over `prev`.
  double initiality_probability(int next, double tau) const;

  struct Piece {
    double lo;  // entry times in (lo, hi]
    double hi;
    int first;  // first observation at or after any entry time in the piece
    int cell;
  };
  const std::vector<Piece>& pieces() const { return pieces_; }
  // log rho_j on piece k.
  double log_rho(int j, int k) const { return log_rho_[j][k]; }

 private:
  void run();

  const ParameterSet* p_;
  const Kernel* kernel_;
  EntryPassOptions opt_;
  double horizon_;
  std::vector<double> times_;
  std::vector<SegmentDensityCache> caches_;
  std::vector<Piece> pieces_;
  std::vector<std::vector<double>> log_rho_;
};

struct BackwardStats {
  long proposals = 0;
  int steps = 0;
};

// Draws a hidden path ending in `label` at `censor_time` from the posterior implied by the
// entry pass.
Trajectory backward_sample(const EntryPass& pass, double censor_time, int label, Rng& rng,
                           BackwardStats* stats = nullptr, int max_steps = 10000, long max_proposals = 100000);

// Observation index range [first, last) of every visit of a path.
std::vector<std::pair<int, int>> visit_ranges(const Trajectory& x, const std::vector<double>& times);

// log density of a path and the observations, split by parameter block.
struct CompleteLogDensity {
  double initial = 0.0;
  double sojourn = 0.0;
  double transition = 0.0;
  double emission = 0.0;
  double total() const { return initial + sojourn + transition + emission; }
};

CompleteLogDensity complete_log_density(const ParameterSet& p, const Episode& e, const Trajectory& x);

}  // namespace hasmm
