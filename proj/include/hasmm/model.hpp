#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "hasmm/emission.hpp"

namespace hasmm {

using json = nlohmann::json;

struct SojournParams {
  double shape = 1.0;
  double rate = 1.0;
};

// States are 0-based internally: 0 is the safe absorbing state, n_states-1 the catastrophic one.
// Files use 1-based state numbers.
struct ParameterSet {
  int n_states = 0;
  std::vector<SojournParams> sojourn;
  Eigen::VectorXd initial;
  Eigen::MatrixXd eta;
  Eigen::MatrixXd beta;
  std::vector<GpHyper> emission;
  double zeta = 1.0;

  int n_streams() const { return emission.empty() ? 0 : emission.front().n_streams(); }
  int safe() const { return 0; }
  int catastrophic() const { return n_states - 1; }
  bool is_absorbing(int i) const { return i == 0 || i == n_states - 1; }
};

void validate(const ParameterSet& p);

json to_json(const ParameterSet& p);
ParameterSet params_from_json(const json& j);
ParameterSet load_params(const std::string& path);
void save_params(const ParameterSet& p, const std::string& path);

// Stable 64-bit hash of the canonical JSON form.
std::uint64_t fingerprint(const ParameterSet& p);
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed = 1469598103934665603ULL);

// Gamma sojourn law (shape-rate).
double sojourn_pdf(const ParameterSet& p, int i, double s);
double sojourn_log_pdf(const ParameterSet& p, int i, double s);
double sojourn_cdf(const ParameterSet& p, int i, double s);
double sojourn_sf(const ParameterSet& p, int i, double s);
double sojourn_quantile(const ParameterSet& p, int i, double prob);
// Integral of the survival function over [0, x].
double integrated_survival(const ParameterSet& p, int i, double x);

// Probability that a sojourn in i of length s ends in j.
double transition_fn(const ParameterSet& p, int i, int j, double s);
double log_transition_fn(const ParameterSet& p, int i, int j, double s);
bool has_duration_dependence(const ParameterSet& p, int i);

// Semi-Markov kernel K_ij(x) = P(S_i <= x, next = j) tabulated on a quadrature grid, together
// with the sojourn CDF and the integrals needed for elapsed-time conditioning.
class Kernel {
 public:
  Kernel(const ParameterSet& p, double horizon, double step);

  const ParameterSet& params() const { return p_; }
  int n_states() const { return p_.n_states; }
  double step() const { return step_; }

  double cdf(int i, double x) const;
  // Integral of the survival function over [0, x].
  double integrated_survival(int i, double x) const;
  double kernel(int i, int j, double x) const;
  // Integral of kernel(i, j, .) over [0, x].
  double cumulative(int i, int j, double x) const;
  // Mean of g_ij(S) given S <= s.
  double mean_transition(int i, int j, double s) const;
  // P(leave i within tau and enter j | elapsed time in i lies in [lo, hi]), elapsed weighted by
  // survival. lo == hi conditions on that exact elapsed time.
  double truncated(int i, int j, double tau, double lo, double hi) const;
  // P(still in the same visit of i after tau more hours | elapsed in [lo, hi]).
  double stay(int i, double tau, double lo, double hi) const;
  // Embedded jump chain, K_ij(infinity).
  Eigen::MatrixXd jump_matrix() const;

 private:
  struct Row {
    std::vector<double> cdf, pdf, isurv;
    std::vector<std::vector<double>> k, dk, ck;  // per target state
  };
  ParameterSet p_;
  double step_;
  int points_ = 0;
  std::vector<Row> rows_;  // transient states only, indexed by state
};

double mean_transition_fn(const ParameterSet& p, int i, int j, double s, double step = 0.01);
double semi_markov_kernel(const ParameterSet& p, int i, int j, double s, double step = 0.01);
double truncated_kernel(const ParameterSet& p, int i, int j, double tau, double lo, double hi, double step = 0.01);

// Probability of eventually reaching the catastrophic state from each state.
Eigen::VectorXd absorption_probabilities(const ParameterSet& p);

// Largest quantile across transient (or all) states.
double max_sojourn_quantile(const ParameterSet& p, double prob, bool transient_only);

}  // namespace hasmm
