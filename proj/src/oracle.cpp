#include <cmath>
#include <limits>
#include <map>
#include <tuple>

#include "hasmm/error.hpp"
#include "hasmm/eval.hpp"

namespace hasmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Paths with sojourns rounded to multiples of the step are summed by entry time instead of one
// by one: f[d][j][k] is the weight of entering j at grid time k*h as visit d, jointly with the
// observations before that time. Emissions factorize over visits, so this equals the path sum.
class Enumerator {
 public:
  Enumerator(const ParameterSet& p, const Episode& e, double step, int max_visits, long budget)
      : p_(p), e_(e), h_(step), cap_(max_visits), budget_(budget) {}

  Eigen::VectorXd posterior(int m) {
    const int n = p_.n_states;
    const double now = e_.times[m - 1];
    const int last = static_cast<int>(std::floor(now / h_ + 1e-9));
    std::vector<std::vector<std::vector<double>>> f(
        cap_, std::vector<std::vector<double>>(n, std::vector<double>(last + 1, kNegInf)));
    for (int i = 0; i < n; ++i)
      if (p_.initial[i] > 0.0) f[0][i][0] = std::log(p_.initial[i]);
    std::vector<double> acc(n, kNegInf);
    for (int d = 0; d < cap_; ++d) {
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k <= last; ++k) {
          const double lw = f[d][i][k];
          if (lw == kNegInf) continue;
          const double entry = k * h_;
          const int a = first_at_or_after(e_.times, entry);
          // Still in this visit at the newest observation.
          const int k0 = last - k + 1;
          // Absorbing visits never end here: the filter is not told when the episode stops.
          const double surv = p_.is_absorbing(i) ? 1.0 : sojourn_sf(p_, i, k0 == 1 ? 0.0 : (k0 - 0.5) * h_);
          if (surv > 0.0) acc[i] = log_add(acc[i], lw + std::log(surv) + segment(i, a, m));
          if (p_.is_absorbing(i) || d + 1 >= cap_) continue;
          for (int s = 1; k + s <= last; ++s) {
            if ((nodes_ += n) > budget_) throw Error(ErrorKind::Numerical, "enumeration: budget exceeded");
            const double mass = pmf(i, s);
            if (!(mass > 0.0)) continue;
            const double exit = (k + s) * h_;
            const double base = lw + std::log(mass) + segment(i, a, std::min(first_at_or_after(e_.times, exit), m));
            for (int j = 0; j < n; ++j) {
              if (j == i) continue;
              const double lg = log_transition_fn(p_, i, j, s * h_);
              if (lg == kNegInf) continue;
              f[d + 1][j][k + s] = log_add(f[d + 1][j][k + s], base + lg);
            }
          }
        }
      }
    }
    double total = kNegInf;
    for (double x : acc) total = log_add(total, x);
    require(std::isfinite(total), ErrorKind::Numerical, "enumeration: no path explains the observations");
    Eigen::VectorXd out(n);
    for (int i = 0; i < n; ++i) out[i] = std::exp(acc[i] - total);
    return out / out.sum();
  }

 private:
  // P(sojourn rounds to s steps): nearest multiple of the step, with the first cell starting at 0.
  double pmf(int i, int s) const {
    const double lo = s == 1 ? 0.0 : (s - 0.5) * h_;
    return sojourn_cdf(p_, i, (s + 0.5) * h_) - sojourn_cdf(p_, i, lo);
  }

  double segment(int i, int a, int b) {
    if (b <= a) return 0.0;
    const auto key = std::make_tuple(i, a, b);
    auto it = seg_.find(key);
    if (it != seg_.end()) return it->second;
    Segment s;
    s.times.assign(e_.times.begin() + a, e_.times.begin() + b);
    s.values = e_.values.middleRows(a, b - a);
    return seg_[key] = segment_log_density(p_.emission[i], s);
  }

  const ParameterSet& p_;
  const Episode& e_;
  double h_;
  int cap_;
  long budget_;
  long nodes_ = 0;
  std::map<std::tuple<int, int, int>, double> seg_;
};

}  // namespace

std::vector<Eigen::VectorXd> oracle_enumerate(const ParameterSet& p, const Episode& e, double step, int max_visits,
                                              long budget) {
  require(step > 0.0 && max_visits >= 1, ErrorKind::InvalidParameters, "enumeration: bad step or visit cap");
  Enumerator en(p, e, step, max_visits, budget);
  std::vector<Eigen::VectorXd> out;
  for (int m = 1; m <= e.size(); ++m) out.push_back(en.posterior(m));
  return out;
}

Eigen::MatrixXd ctmc_generator(const ParameterSet& p) {
  const int n = p.n_states;
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    if (p.is_absorbing(i)) continue;
    require(p.sojourn[i].shape == 1.0 && !has_duration_dependence(p, i), ErrorKind::InvalidParameters,
            "ctmc oracle: needs exponential sojourns and constant transitions");
    const double r = p.sojourn[i].rate;
    for (int j = 0; j < n; ++j)
      if (j != i) l(i, j) = r * transition_fn(p, i, j, 0.0);
    l(i, i) = -r;
  }
  return l;
}

Eigen::MatrixXd expm(const Eigen::MatrixXd& a, int terms) {
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = norm > 0.5 ? static_cast<int>(std::ceil(std::log2(norm / 0.5))) : 0;
  const Eigen::MatrixXd b = a / std::ldexp(1.0, squarings);
  const int n = static_cast<int>(a.rows());
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(n, n), term = Eigen::MatrixXd::Identity(n, n);
  for (int k = 1; k <= terms; ++k) {
    term = term * b / k;
    out += term;
  }
  for (; squarings > 0; --squarings) out = out * out;
  return out;
}

std::vector<Eigen::MatrixXd> oracle_ctmc(const ParameterSet& p, const std::vector<double>& taus, int terms) {
  const Eigen::MatrixXd l = ctmc_generator(p);
  std::vector<Eigen::MatrixXd> out;
  for (double t : taus) out.push_back(expm(l * t, terms));
  return out;
}

}  // namespace hasmm
