#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hasmm/filter.hpp"

namespace hasmm {

// Risk trace of one episode with its outcome.
struct ScoredEpisode {
  std::string id;
  int label = 0;  // 0-based absorbing state
  double censor_time = 0.0;
  std::vector<double> times;
  std::vector<double> risk;
};

struct DetectionOutcome {
  std::string id;
  int label = 0;
  bool crossed = false;
  double crossing_time = 0.0;
  double censor_time = 0.0;
};

struct RocPoint {
  double threshold;
  double tpr;
  double ppv;
};

struct RocCurve {
  std::vector<RocPoint> points;  // thresholds strictly decreasing
  double auc = 0.0;
  int omitted = 0;  // thresholds with no predicted positive
};

// First snapshot with risk >= threshold strictly before the censor time.
DetectionOutcome detect(const ScoredEpisode& e, double threshold);

// Positives are episodes absorbed in `positive_label`. PPV is integrated over the TPR axis by
// trapezoid, extended flat from the first point down to TPR = 0.
RocCurve roc_curve(const std::vector<ScoredEpisode>& episodes, std::vector<double> thresholds, int positive_label);
// Thresholds at every distinct per-episode maximum risk.
RocCurve roc_from_scores(const std::vector<ScoredEpisode>& episodes, int positive_label);

// Mean of (crossing time - censor time) over positive episodes that crossed.
std::optional<double> timeliness(const std::vector<DetectionOutcome>& outcomes, int positive_label);

struct OperatingPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double ppv = 0.0;
  std::optional<double> timeliness;
};

// Largest threshold reaching the target TPR.
std::optional<OperatingPoint> operating_point(const std::vector<ScoredEpisode>& episodes, const RocCurve& curve,
                                              double target_tpr, int positive_label);

ScoredEpisode score_episode(const Episode& e, const std::vector<PosteriorSnapshot>& snaps);

// Posterior over the current state at every observation prefix, summed over every path whose
// sojourns are rounded to multiples of `step` and whose visit count is at most `max_visits`.
// More than `budget` elementary path extensions is an error.
std::vector<Eigen::VectorXd> oracle_enumerate(const ParameterSet& p, const Episode& e, double step = 1.0,
                                              int max_visits = 6, long budget = 10000000);

// Matrix exponential of the generator of an exponential-sojourn, constant-transition model at
// every tau in `taus`. result[k] is the N x N transition matrix at taus[k].
std::vector<Eigen::MatrixXd> oracle_ctmc(const ParameterSet& p, const std::vector<double>& taus, int terms = 30);
Eigen::MatrixXd ctmc_generator(const ParameterSet& p);
Eigen::MatrixXd expm(const Eigen::MatrixXd& a, int terms = 30);

}  // namespace hasmm
