#pragma once

#include <vector>

#include <Eigen/Dense>

#include "hasmm/rng.hpp"

namespace hasmm {

// Multi-task GP for one hidden state: cov = task_cov(l,v) * sigma^2 * exp(-|t-t'|^2 / (2 ell^2)) + jitter * I.
struct GpHyper {
  Eigen::VectorXd mean;
  double sigma = 1.0;
  double length_scale = 1.0;
  Eigen::MatrixXd task_cov;
  double jitter = 1e-6;

  int n_streams() const { return static_cast<int>(mean.size()); }
};

void validate(const GpHyper& h);

// Observations of one state visit. values is n x Q with NaN marking a missing entry.
struct Segment {
  std::vector<double> times;
  Eigen::MatrixXd values;
};

// Stream-major covariance: entry (l*n + a, v*n + b) is the covariance of stream l at times[a]
// and stream v at times[b], jitter included on the diagonal.
Eigen::MatrixXd build_covariance(const GpHyper& h, const std::vector<double>& times);

// Log density of a zero-mean Gaussian; falls back to a pseudo-inverse when Cholesky fails.
double gaussian_log_density(const Eigen::MatrixXd& cov, const Eigen::VectorXd& resid, bool* used_fallback = nullptr);

// Exact log density of the observed entries of a segment. Empty segments contribute 0.
double segment_log_density(const GpHyper& h, const Segment& seg, bool* used_fallback = nullptr);

struct SegmentSample {
  Eigen::MatrixXd values;  // n x Q
  bool used_fallback = false;
};

SegmentSample sample_segment(const GpHyper& h, const std::vector<double>& times, Rng& rng);

// Log densities of every contiguous run of observations of one episode under one state.
// Runs longer than window+1 observations condition each point on its `window` predecessors only.
// Observations may be appended one at a time.
class SegmentDensityCache {
 public:
  SegmentDensityCache() = default;
  SegmentDensityCache(const GpHyper& h, int window);
  SegmentDensityCache(const GpHyper& h, const std::vector<double>& times, const Eigen::MatrixXd& values,
                      int window);

  void push(double t, const Eigen::RowVectorXd& y);

  // Observations [a, b) with 0 <= a <= b <= size().
  double log_density(int a, int b) const;
  int size() const { return static_cast<int>(times_.size()); }
  int window() const { return window_; }
  bool used_fallback() const { return used_fallback_; }

 private:
  GpHyper h_;
  int window_ = 0;
  bool used_fallback_ = false;
  std::vector<double> times_;
  std::vector<Eigen::RowVectorXd> values_;
  std::vector<std::vector<double>> cond_;  // cond_[k][r]: log p(y_k | y_{k-r..k-1})
  std::vector<double> prefix_;             // prefix sums of cond_[k][min(k, window)]
  std::vector<double> last_;               // last_[r] = log p(y_{k-r..k}) for the newest k
};

}  // namespace hasmm
