#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace hasmm::testing {

// Two-sided Kolmogorov-Smirnov statistic of draws against a CDF.
template <typename F>
double ks_statistic(std::vector<double> xs, F&& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double f = cdf(xs[k]);
    d = std::max({d, (k + 1) / n - f, f - k / n});
  }
  return d;
}

// Asymptotic critical value sqrt(-log(alpha / 2) / 2) / sqrt(n).
inline double ks_critical(std::size_t n, double alpha) {
  return std::sqrt(-0.5 * std::log(alpha / 2.0)) / std::sqrt(static_cast<double>(n));
}

}  // namespace hasmm::testing
