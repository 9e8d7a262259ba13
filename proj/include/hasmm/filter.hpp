#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hasmm/episode.hpp"
#include "hasmm/volterra.hpp"

namespace hasmm {

struct FilterOptions {
  // Entry windows older than the largest per-state quantile at this level are merged into one
  // message per state. A value >= 1 keeps every window.
  double lag_quantile = 0.9;
  // Observations a GP emission conditions on when a visit is long.
  int emission_window = 24;
  // Risk needs the absorption probabilities to have plateaued on the tau axis.
  bool compute_risk = true;
};

struct PosteriorSnapshot {
  std::string id;
  double t = 0.0;
  Eigen::VectorXd posterior;
  int map_state = 0;  // 0-based
  double risk = 0.0;
};

json snapshot_to_json(const PosteriorSnapshot& s);
PosteriorSnapshot snapshot_from_json(const json& j);

// Causal posterior over the current state. Each message is the joint density of the observations
// so far and of "the visit in progress is in state j and began inside a given entry window".
class ForwardFilter {
 public:
  ForwardFilter(const ParameterSet& p, const TransitionTable& table, const FilterOptions& opt = {});

  void reset(const std::string& id = "");
  PosteriorSnapshot push(double t, const Eigen::RowVectorXd& y);

  // log p(y_1..y_m) accumulated so far.
  double log_likelihood() const { return loglik_; }
  // Lookups by non-negligible messages whose tau or elapsed time fell beyond the table grid.
  long saturated_queries() const { return saturated_; }
  bool emission_fallback() const;
  int size() const { return static_cast<int>(times_.size()); }
  double lag_horizon() const { return horizon_; }
  // Number of messages held at the newest step.
  int message_count() const { return steps_.empty() ? 0 : static_cast<int>(steps_.back().msgs.size()); }

 private:
  struct Message {
    int state;
    double entry_lo;  // entry time window; lo == hi == 0 marks the initial visit
    double entry_hi;
    bool initial;
    double log_alpha;  // normalized by the step's evidence
  };
  struct Step {
    std::vector<Message> msgs;
    double log_evidence;  // log p(y_1..y_m)
    std::vector<double> entry;  // log mass entering each state between the previous observation and this one
  };

  double fresh(int i, int j, double tau, double lo, double hi, bool count);
  double window_survival(int j, double entry_lo, double entry_hi, double now, double ref) const;

  ParameterSet p_;
  const TransitionTable* table_;
  FilterOptions opt_;
  double horizon_;
  Eigen::VectorXd absorb_;
  std::string id_;
  std::vector<double> times_;
  std::vector<SegmentDensityCache> caches_;
  std::vector<Step> steps_;
  double loglik_ = 0.0;
  long saturated_ = 0;
};

std::vector<PosteriorSnapshot> run_filter(const ParameterSet& p, const TransitionTable& table, const Episode& e,
                                          const FilterOptions& opt = {});

// Sum_j posterior_j * P(eventually catastrophic | fresh entry into j).
double risk_score(const Eigen::VectorXd& posterior, const Eigen::VectorXd& absorption);

}  // namespace hasmm
