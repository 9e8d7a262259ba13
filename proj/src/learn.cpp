#include "hasmm/learn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <tuple>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <spdlog/spdlog.h>

#include "hasmm/error.hpp"
#include "hasmm/parallel.hpp"

namespace hasmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093453;

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

// ---------------------------------------------------------------------------
// Weighted sufficient statistics of one sample set.

struct Stats {
  std::vector<double> init;                                  // per state
  std::vector<std::vector<std::pair<double, double>>> soj;   // (s, w) per state
  std::vector<std::vector<std::tuple<double, int, double>>> trans;  // (s, next, w) per state
  std::vector<double> seg_w;                                 // per distinct segment
  std::vector<std::vector<int>> segs_of;                     // segment ids per state
};

Stats collect(const SampleSet& s, const std::vector<std::vector<double>>& w, int n) {
  Stats st;
  st.init.assign(n, 0.0);
  st.soj.assign(n, {});
  st.trans.assign(n, {});
  st.seg_w.assign(s.segments().size(), 0.0);
  st.segs_of.assign(n, {});
  for (std::size_t k = 0; k < s.segments().size(); ++k) st.segs_of[s.segments()[k].state].push_back(static_cast<int>(k));
  for (int d = 0; d < s.episodes(); ++d) {
    const int g_count = s.samples(d);
    for (int g = 0; g < g_count; ++g) {
      const double wt = w[d][g] / g_count;
      if (!(wt > 0.0)) continue;
      const auto& vs = s.visits(d, g);
      st.init[vs.front().state] += wt;
      for (const auto& v : vs) {
        st.soj[v.state].emplace_back(v.sojourn, wt);
        if (v.next >= 0) st.trans[v.state].emplace_back(v.sojourn, v.next, wt);
        if (v.segment >= 0) st.seg_w[v.segment] += wt;
      }
    }
  }
  return st;
}

double init_objective(const Stats& st, const ParameterSet& p) {
  double out = 0.0;
  for (int i = 0; i < p.n_states; ++i)
    if (st.init[i] > 0.0) out += st.init[i] * safe_log(p.initial[i]);
  return out;
}

double sojourn_objective(const Stats& st, const ParameterSet& p, int i) {
  double out = 0.0;
  for (const auto& [s, w] : st.soj[i]) out += w * sojourn_log_pdf(p, i, s);
  return out;
}

double transition_objective(const Stats& st, const ParameterSet& p, int i) {
  double out = 0.0;
  for (const auto& [s, j, w] : st.trans[i]) out += w * log_transition_fn(p, i, j, s);
  return out;
}

double emission_objective(const Stats& st, const SampleSet& s, const GpHyper& h, int j) {
  double out = 0.0;
  for (int k : st.segs_of[j])
    if (st.seg_w[k] > 0.0) out += st.seg_w[k] * segment_log_density(h, s.segment(k));
  return out;
}

double full_objective(const Stats& st, const SampleSet& s, const ParameterSet& p) {
  double out = init_objective(st, p);
  for (int i = 0; i < p.n_states; ++i) {
    out += sojourn_objective(st, p, i) + emission_objective(st, s, p.emission[i], i);
    if (!p.is_absorbing(i)) out += transition_objective(st, p, i);
  }
  return out;
}

// Weighted Gamma MLE: rate in closed form, shape from log k - digamma(k) = log mean - mean log.
bool fit_gamma(const std::vector<std::pair<double, double>>& items, SojournParams* out) {
  double sw = 0.0, ss = 0.0, sl = 0.0;
  for (const auto& [s, w] : items) {
    if (!(s > 0.0)) continue;
    sw += w;
    ss += w * s;
    sl += w * std::log(s);
  }
  if (!(sw > 0.0)) return false;
  const double mean = ss / sw;
  const double c = std::log(mean) - sl / sw;
  if (!(c > 1e-12)) return false;
  double k = (3.0 - c + std::sqrt((c - 3.0) * (c - 3.0) + 24.0 * c)) / (12.0 * c);
  for (int it = 0; it < 100; ++it) {
    const double f = std::log(k) - boost::math::digamma(k) - c;
    const double df = 1.0 / k - boost::math::trigamma(k);
    // Newton on log k keeps the iterate positive.
    const double step = f / (df * k);
    k *= std::exp(-std::clamp(step, -2.0, 2.0));
    if (std::abs(step) < 1e-12) break;
  }
  out->shape = k;
  out->rate = k / mean;
  return std::isfinite(k) && k > 0.0;
}

// Weighted multinomial logistic regression of the next state on (1, s) for transient row i.
// Softmax logits are shift invariant, so the result is reported with the smallest beta equal
// to zero and eta of the first admissible target equal to zero.
void fit_transition_row(const std::vector<std::tuple<double, int, double>>& items, int i, ParameterSet* p) {
  const int n = p->n_states;
  std::vector<int> targets;
  for (int j = 0; j < n; ++j)
    if (j != i) targets.push_back(j);
  const int m = static_cast<int>(targets.size());
  std::vector<int> slot(n, -1);
  for (int k = 0; k < m; ++k) slot[targets[k]] = k;
  double sw = 0.0, ss = 0.0;
  for (const auto& [s, j, w] : items) {
    sw += w;
    ss += w * s;
  }
  if (!(sw > 0.0)) return;
  const double scale = std::max(ss / sw, 1e-6);

  Eigen::VectorXd theta(2 * m);
  for (int k = 0; k < m; ++k) {
    theta[2 * k] = p->eta(i, targets[k]);
    theta[2 * k + 1] = p->beta(i, targets[k]) * scale;
  }
  auto loglik = [&](const Eigen::VectorXd& th) {
    double out = 0.0;
    Eigen::VectorXd z(m);
    for (const auto& [s, j, w] : items) {
      const double x = s / scale;
      for (int k = 0; k < m; ++k) z[k] = th[2 * k] + th[2 * k + 1] * x;
      const double mx = z.maxCoeff();
      out += w * (z[slot[j]] - mx - std::log((z.array() - mx).exp().sum()));
    }
    return out;
  };
  double cur = loglik(theta);
  Eigen::VectorXd grad(2 * m), z(m), pi(m);
  Eigen::MatrixXd hess(2 * m, 2 * m);
  for (int it = 0; it < 60; ++it) {
    grad.setZero();
    hess.setZero();
    for (const auto& [s, j, w] : items) {
      const double x = s / scale;
      for (int k = 0; k < m; ++k) z[k] = theta[2 * k] + theta[2 * k + 1] * x;
      pi = (z.array() - z.maxCoeff()).exp();
      pi /= pi.sum();
      const double feat[2] = {1.0, x};
      for (int a = 0; a < m; ++a) {
        const double r = (a == slot[j] ? 1.0 : 0.0) - pi[a];
        for (int u = 0; u < 2; ++u) grad[2 * a + u] += w * r * feat[u];
        for (int b = 0; b < m; ++b) {
          const double c = pi[a] * ((a == b ? 1.0 : 0.0) - pi[b]);
          for (int u = 0; u < 2; ++u)
            for (int v = 0; v < 2; ++v) hess(2 * a + u, 2 * b + v) += w * c * feat[u] * feat[v];
        }
      }
    }
    if (grad.lpNorm<Eigen::Infinity>() < 1e-10 * sw) break;
    // The shift direction is flat; a small ridge keeps the system solvable.
    hess.diagonal().array() += 1e-8 * sw + 1e-12;
    Eigen::VectorXd step = hess.ldlt().solve(grad);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 30; ++ls) {
      Eigen::VectorXd cand = (theta + t * step).cwiseMax(-60.0).cwiseMin(60.0);
      const double v = loglik(cand);
      if (v >= cur) {
        moved = v > cur;
        theta = cand;
        cur = v;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  double bmin = std::numeric_limits<double>::infinity();
  for (int k = 0; k < m; ++k) bmin = std::min(bmin, theta[2 * k + 1]);
  const double eref = theta[0];
  for (int k = 0; k < m; ++k) {
    p->eta(i, targets[k]) = theta[2 * k] - eref;
    p->beta(i, targets[k]) = (theta[2 * k + 1] - bmin) / scale;
  }
}

// Quadratic form and log determinant of one segment under unit amplitude.
struct UnitStat {
  double quad = 0.0;
  double logdet = 0.0;
  int dim = 0;
  bool ok = true;
};

UnitStat unit_stat(const GpHyper& unit, const Segment& seg) {
  UnitStat out;
  const int n = static_cast<int>(seg.times.size());
  const int q = unit.n_streams();
  std::vector<std::pair<int, int>> entries;
  for (int a = 0; a < n; ++a)
    for (int l = 0; l < q; ++l)
      if (!std::isnan(seg.values(a, l))) entries.emplace_back(a, l);
  const int d = static_cast<int>(entries.size());
  out.dim = d;
  if (d == 0) return out;
  Eigen::MatrixXd cov(d, d);
  Eigen::VectorXd r(d);
  for (int x = 0; x < d; ++x) {
    r[x] = seg.values(entries[x].first, entries[x].second) - unit.mean[entries[x].second];
    for (int y = 0; y <= x; ++y) {
      const double dt = (seg.times[entries[x].first] - seg.times[entries[y].first]) / unit.length_scale;
      double c = unit.task_cov(entries[x].second, entries[y].second) * std::exp(-0.5 * dt * dt);
      if (x == y) c += unit.jitter;
      cov(x, y) = cov(y, x) = c;
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all()) {
    out.ok = false;
    return out;
  }
  out.quad = llt.matrixL().solve(r).squaredNorm();
  out.logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return out;
}

// Objective with the amplitude profiled out: cov = sigma^2 (task_cov (x) R(ell) + rho I).
double profiled_objective(const Stats& st, const SampleSet& s, const GpHyper& h, int j, double ell, double rho,
                          double* sigma2) {
  GpHyper unit = h;
  unit.sigma = 1.0;
  unit.length_scale = ell;
  unit.jitter = rho;
  double wq = 0.0, wn = 0.0, wl = 0.0;
  for (int k : st.segs_of[j]) {
    const double w = st.seg_w[k];
    if (!(w > 0.0)) continue;
    const UnitStat u = unit_stat(unit, s.segment(k));
    if (!u.ok) return kNegInf;
    wq += w * u.quad;
    wn += w * u.dim;
    wl += w * u.logdet;
  }
  if (!(wn > 0.0)) return kNegInf;
  const double s2 = wq / wn;
  *sigma2 = s2;
  return -0.5 * (wn * kLog2Pi + wn * std::log(s2) + wl + wq / s2);
}

// Maximizes f over [a, b] by golden-section search.
template <typename F>
double golden_max(F&& f, double a, double b, double tol) {
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return fc >= fd ? c : d;
}

void fit_emission(const Stats& st, const SampleSet& s, int j, GpHyper* h, std::vector<std::string>* reverted) {
  double total = 0.0;
  for (int k : st.segs_of[j]) total += st.seg_w[k];
  if (!(total > 0.0)) return;
  const int q = h->n_streams();
  double cur = emission_objective(st, s, *h, j);
  auto consider = [&](const GpHyper& cand, const char* what) {
    const double v = emission_objective(st, s, cand, j);
    if (v >= cur) {
      *h = cand;
      cur = v;
    } else {
      reverted->push_back("emission[" + std::to_string(j + 1) + "]." + what);
    }
  };

  // Stream means from weighted averages of the observed values.
  {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(q), cnt = Eigen::VectorXd::Zero(q);
    for (int k : st.segs_of[j]) {
      const double w = st.seg_w[k];
      if (!(w > 0.0)) continue;
      const Eigen::MatrixXd& v = s.segment(k).values;
      for (int a = 0; a < v.rows(); ++a)
        for (int l = 0; l < q; ++l)
          if (!std::isnan(v(a, l))) {
            sum[l] += w * v(a, l);
            cnt[l] += w;
          }
    }
    GpHyper cand = *h;
    for (int l = 0; l < q; ++l)
      if (cnt[l] > 0.0) cand.mean[l] = sum[l] / cnt[l];
    consider(cand, "mean");
  }
  // Stream covariance from same-time residual products; normalized to mean diagonal 1 with the
  // scale carried by sigma.
  {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(q, q), cnt = Eigen::MatrixXd::Zero(q, q);
    for (int k : st.segs_of[j]) {
      const double w = st.seg_w[k];
      if (!(w > 0.0)) continue;
      const Eigen::MatrixXd& v = s.segment(k).values;
      for (int a = 0; a < v.rows(); ++a)
        for (int l = 0; l < q; ++l)
          for (int u = 0; u < q; ++u)
            if (!std::isnan(v(a, l)) && !std::isnan(v(a, u))) {
              c(l, u) += w * (v(a, l) - h->mean[l]) * (v(a, u) - h->mean[u]);
              cnt(l, u) += w;
            }
    }
    if ((cnt.array() > 0.0).all()) {
      c = c.cwiseQuotient(cnt);
      c = 0.5 * (c + c.transpose());
      const double md = c.diagonal().mean();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
      if (md > 0.0 && es.eigenvalues().minCoeff() > 1e-9 * md) {
        const double rho = h->jitter / (h->sigma * h->sigma);
        GpHyper cand = *h;
        cand.task_cov = c / md;
        cand.sigma = std::sqrt(md / (1.0 + rho));
        cand.jitter = rho * cand.sigma * cand.sigma;
        consider(cand, "task_cov");
      }
    }
  }
  // Length scale, then the noise ratio, each with the amplitude profiled.
  {
    const double rho = h->jitter / (h->sigma * h->sigma);
    double s2 = 0.0;
    auto f = [&](double log_ell) { return profiled_objective(st, s, *h, j, std::exp(log_ell), rho, &s2); };
    const double x0 = std::log(h->length_scale);
    const double best = golden_max(f, x0 - 1.5, x0 + 1.5, 0.01);
    if (f(best) > kNegInf) {
      GpHyper cand = *h;
      cand.length_scale = std::exp(best);
      cand.sigma = std::sqrt(s2);
      cand.jitter = rho * s2;
      consider(cand, "length_scale");
    }
  }
  {
    const double rho = h->jitter / (h->sigma * h->sigma);
    double s2 = 0.0;
    auto f = [&](double log_rho) { return profiled_objective(st, s, *h, j, h->length_scale, std::exp(log_rho), &s2); };
    const double x0 = std::log(rho);
    const double lo = std::max(x0 - 2.0, std::log(1e-6)), hi = std::min(x0 + 2.0, std::log(10.0));
    if (hi > lo) {
      const double best = golden_max(f, lo, hi, 0.01);
      if (f(best) > kNegInf) {
        GpHyper cand = *h;
        cand.sigma = std::sqrt(s2);
        cand.jitter = std::exp(best) * s2;
        consider(cand, "jitter");
      }
    }
  }
}

std::vector<double> flatten(const ParameterSet& p) {
  std::vector<double> v;
  for (const auto& s : p.sojourn) {
    v.push_back(s.shape);
    v.push_back(s.shape / s.rate);
  }
  for (int i = 0; i < p.n_states; ++i) v.push_back(p.initial[i]);
  for (int i = 0; i < p.n_states; ++i)
    for (int j = 0; j < p.n_states; ++j) {
      v.push_back(p.eta(i, j));
      v.push_back(p.beta(i, j));
    }
  for (const auto& h : p.emission) {
    for (int l = 0; l < h.n_streams(); ++l) v.push_back(h.mean[l]);
    v.push_back(h.sigma);
    v.push_back(h.length_scale);
    v.push_back(h.jitter);
    for (int l = 0; l < h.task_cov.size(); ++l) v.push_back(h.task_cov.data()[l]);
  }
  return v;
}

double max_relative_change(const ParameterSet& a, const ParameterSet& b) {
  const auto x = flatten(a), y = flatten(b);
  double out = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) out = std::max(out, std::abs(x[k] - y[k]) / std::max(1.0, std::abs(x[k])));
  return out;
}

double max_censor_time(const std::vector<Episode>& episodes) {
  double t = 1.0;
  for (const auto& e : episodes) t = std::max(t, e.censor_time);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// SampleSet

SampleSet::SampleSet(const std::vector<Episode>& episodes, std::vector<std::vector<Trajectory>> paths,
                     const ParameterSet& base)
    : paths_(std::move(paths)) {
  require(paths_.size() == episodes.size(), ErrorKind::InvalidParameters, "sample set: one path list per episode");
  std::map<std::tuple<int, int, int, int>, int> ids;
  visits_.resize(paths_.size());
  for (std::size_t d = 0; d < paths_.size(); ++d) {
    const Episode& e = episodes[d];
    visits_[d].resize(paths_[d].size());
    for (std::size_t g = 0; g < paths_[d].size(); ++g) {
      const Trajectory& x = paths_[d][g];
      require(!x.states.empty() && x.states.size() == x.sojourns.size(), ErrorKind::InvalidParameters,
              "sample set: malformed path");
      const auto ranges = visit_ranges(x, e.times);
      auto& vs = visits_[d][g];
      for (std::size_t k = 0; k < x.states.size(); ++k) {
        Visit v{x.states[k], x.sojourns[k], k + 1 < x.states.size() ? x.states[k + 1] : -1, -1};
        const auto [a, b] = ranges[k];
        if (b > a) {
          const auto key = std::make_tuple(v.state, static_cast<int>(d), a, b);
          auto it = ids.find(key);
          if (it == ids.end()) {
            it = ids.emplace(key, static_cast<int>(keys_.size())).first;
            keys_.push_back({v.state, static_cast<int>(d), a, b});
            Segment seg;
            seg.times.assign(e.times.begin() + a, e.times.begin() + b);
            seg.values = e.values.middleRows(a, b - a);
            segs_.push_back(std::move(seg));
          }
          v.segment = it->second;
        }
        vs.push_back(v);
      }
    }
  }
  const auto sv = segment_values(base);
  base_.resize(paths_.size());
  for (std::size_t d = 0; d < paths_.size(); ++d) {
    base_[d].resize(paths_[d].size());
    for (std::size_t g = 0; g < paths_[d].size(); ++g) {
      base_[d][g] = path_log_density(base, static_cast<int>(d), static_cast<int>(g), sv);
      if (!std::isfinite(base_[d][g]))
        throw Error(ErrorKind::Numerical, "sample set: path " + std::to_string(g) + " of episode " +
                                              episodes[d].id + " has zero density under its own parameters");
    }
  }
}

std::vector<double> SampleSet::segment_values(const ParameterSet& p) const {
  std::vector<double> out(keys_.size());
  for (std::size_t k = 0; k < keys_.size(); ++k) out[k] = segment_log_density(p.emission[keys_[k].state], segs_[k]);
  return out;
}

double SampleSet::path_log_density(const ParameterSet& p, int d, int g, const std::vector<double>& sv) const {
  const auto& vs = visits_[d][g];
  double out = safe_log(p.initial[vs.front().state]);
  for (const auto& v : vs) {
    out += sojourn_log_pdf(p, v.state, v.sojourn);
    if (v.next >= 0) out += log_transition_fn(p, v.state, v.next, v.sojourn);
    if (v.segment >= 0) out += sv[v.segment];
  }
  return out;
}

std::vector<std::vector<double>> SampleSet::weights(const ParameterSet& p) const {
  const auto sv = segment_values(p);
  std::vector<std::vector<double>> w(paths_.size());
  for (std::size_t d = 0; d < paths_.size(); ++d) {
    const int g_count = samples(static_cast<int>(d));
    std::vector<double> lr(g_count);
    double mx = kNegInf;
    for (int g = 0; g < g_count; ++g) {
      lr[g] = path_log_density(p, static_cast<int>(d), g, sv) - base_[d][g];
      mx = std::max(mx, lr[g]);
    }
    w[d].resize(g_count);
    if (mx == kNegInf) {
      throw Error(ErrorKind::Numerical, "importance weights: every path of episode " + std::to_string(d) +
                                            " has zero density under the current parameters");
    }
    double sum = 0.0;
    for (int g = 0; g < g_count; ++g) sum += (w[d][g] = std::exp(lr[g] - mx));
    for (int g = 0; g < g_count; ++g) w[d][g] *= g_count / sum;
  }
  return w;
}

double SampleSet::objective(const ParameterSet& p, const std::vector<std::vector<double>>& w) const {
  const auto sv = segment_values(p);
  double out = 0.0;
  for (std::size_t d = 0; d < paths_.size(); ++d) {
    const int g_count = samples(static_cast<int>(d));
    for (int g = 0; g < g_count; ++g) {
      if (!(w[d][g] > 0.0)) continue;
      const double lp = path_log_density(p, static_cast<int>(d), g, sv);
      if (!std::isfinite(lp))
        throw Error(ErrorKind::Numerical, "objective: non-finite log density at (" + std::to_string(d) + ", " +
                                              std::to_string(g) + ")");
      out += w[d][g] * lp / g_count;
    }
  }
  return out;
}

double SampleSet::min_ess(const std::vector<std::vector<double>>& w) const {
  double out = std::numeric_limits<double>::infinity();
  for (const auto& row : w) {
    double s = 0.0, s2 = 0.0;
    for (double x : row) {
      s += x;
      s2 += x * x;
    }
    if (s2 > 0.0) out = std::min(out, s * s / s2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// M-step

ParameterSet m_step(const SampleSet& samples, const std::vector<std::vector<double>>& weights, const ParameterSet& prev,
                    MStepReport* report) {
  const int n = prev.n_states;
  const Stats st = collect(samples, weights, n);
  ParameterSet p = prev;
  MStepReport rep;
  rep.before = full_objective(st, samples, prev);

  {
    ParameterSet cand = p;
    const double total = std::accumulate(st.init.begin(), st.init.end(), 0.0);
    if (total > 0.0) {
      for (int i = 0; i < n; ++i) cand.initial[i] = st.init[i] / total;
      if (init_objective(st, cand) >= init_objective(st, p)) p.initial = cand.initial;
      else rep.reverted.push_back("initial");
    }
  }
  for (int i = 0; i < n; ++i) {
    SojournParams g;
    if (!fit_gamma(st.soj[i], &g)) continue;
    ParameterSet cand = p;
    cand.sojourn[i] = g;
    if (sojourn_objective(st, cand, i) >= sojourn_objective(st, p, i)) p.sojourn[i] = g;
    else rep.reverted.push_back("sojourn[" + std::to_string(i + 1) + "]");
  }
  for (int i = 0; i < n; ++i) {
    if (p.is_absorbing(i) || st.trans[i].empty()) continue;
    ParameterSet cand = p;
    fit_transition_row(st.trans[i], i, &cand);
    if (transition_objective(st, cand, i) >= transition_objective(st, p, i)) {
      p.eta.row(i) = cand.eta.row(i);
      p.beta.row(i) = cand.beta.row(i);
    } else {
      rep.reverted.push_back("transition[" + std::to_string(i + 1) + "]");
    }
  }
  for (int j = 0; j < n; ++j) fit_emission(st, samples, j, &p.emission[j], &rep.reverted);

  rep.after = full_objective(st, samples, p);
  if (report) *report = rep;
  return p;
}

// ---------------------------------------------------------------------------
// Driver

double estimate_intensity(const std::vector<Episode>& episodes) {
  double obs = 0.0, time = 0.0;
  for (const auto& e : episodes) {
    obs += e.size();
    time += e.censor_time;
  }
  return obs > 0.0 && time > 0.0 ? obs / time : 1.0;
}

double observed_log_likelihood(const ParameterSet& p, const std::vector<Episode>& episodes, const LearnConfig& cfg) {
  const Kernel kernel(p, max_censor_time(episodes), cfg.kernel_step);
  std::vector<double> ll(episodes.size());
  parallel_for(static_cast<int>(episodes.size()), cfg.threads, [&](int d) {
    const EntryPass pass(p, kernel, episodes[d], {cfg.entry_step, cfg.emission_window});
    ll[d] = pass.log_likelihood(episodes[d].censor_time, episodes[d].label);
  });
  return std::accumulate(ll.begin(), ll.end(), 0.0);
}

std::vector<std::vector<Trajectory>> draw_paths(const ParameterSet& p, const std::vector<Episode>& episodes,
                                                const LearnConfig& cfg, std::uint64_t stream) {
  const Kernel kernel(p, max_censor_time(episodes), cfg.kernel_step);
  std::vector<std::vector<Trajectory>> out(episodes.size());
  parallel_for(static_cast<int>(episodes.size()), cfg.threads, [&](int d) {
    const Episode& e = episodes[d];
    const EntryPass pass(p, kernel, e, {cfg.entry_step, cfg.emission_window});
    Rng rng(derive_seed(cfg.seed, 0x70617468ULL + stream, static_cast<std::uint64_t>(d)));
    out[d].reserve(cfg.samples);
    try {
      for (int g = 0; g < cfg.samples; ++g) out[d].push_back(backward_sample(pass, e.censor_time, e.label, rng));
    } catch (const Error& err) {
      throw Error(err.kind(), "episode " + e.id + ": " + err.what());
    }
  });
  return out;
}

ParameterSet initial_guess(const std::vector<Episode>& episodes, int n_states, const LearnConfig& cfg) {
  require(n_states >= 3, ErrorKind::InvalidParameters, "initial guess: need at least 3 states");
  require(!episodes.empty(), ErrorKind::MalformedInput, "initial guess: no episodes");
  const int q = static_cast<int>(episodes.front().values.cols());
  // Pool observations; a missing entry takes the stream mean.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(q), cnt = Eigen::VectorXd::Zero(q);
  long rows = 0;
  for (const auto& e : episodes)
    for (int a = 0; a < e.size(); ++a) {
      ++rows;
      for (int l = 0; l < q; ++l)
        if (!std::isnan(e.values(a, l))) {
          mean[l] += e.values(a, l);
          cnt[l] += 1.0;
        }
    }
  require(rows >= n_states, ErrorKind::MalformedInput, "initial guess: fewer observations than states");
  for (int l = 0; l < q; ++l) mean[l] = cnt[l] > 0.0 ? mean[l] / cnt[l] : 0.0;
  Eigen::MatrixXd x(rows, q);
  std::vector<int> owner(rows);
  std::vector<int> last_row(episodes.size(), -1);
  {
    long r = 0;
    for (std::size_t d = 0; d < episodes.size(); ++d) {
      const auto& e = episodes[d];
      for (int a = 0; a < e.size(); ++a, ++r) {
        for (int l = 0; l < q; ++l) x(r, l) = std::isnan(e.values(a, l)) ? mean[l] : e.values(a, l);
        owner[r] = static_cast<int>(d);
        last_row[d] = static_cast<int>(r);
      }
    }
  }
  Eigen::VectorXd sd = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() / rows).sqrt();
  sd = sd.cwiseMax(1e-9);
  const Eigen::MatrixXd z = (x.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();

  // k-means++ with a few restarts; the lowest within-cluster sum of squares wins.
  const int k = n_states;
  std::vector<int> best_assign;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < 5; ++restart) {
    Rng rng(derive_seed(cfg.seed, 0x6b6d65616e73ULL, restart));
    Eigen::MatrixXd centers(k, q);
    centers.row(0) = z.row(static_cast<long>(rng.uniform() * rows) % rows);
    std::vector<double> d2(rows);
    for (int c = 1; c < k; ++c) {
      for (long r = 0; r < rows; ++r) {
        double m = std::numeric_limits<double>::infinity();
        for (int b = 0; b < c; ++b) m = std::min(m, (z.row(r) - centers.row(b)).squaredNorm());
        d2[r] = m;
      }
      int pick = rng.categorical(d2);
      if (pick < 0) pick = c % rows;
      centers.row(c) = z.row(pick);
    }
    std::vector<int> assign(rows, -1);
    double inertia = 0.0;
    for (int it = 0; it < 100; ++it) {
      bool changed = false;
      inertia = 0.0;
      for (long r = 0; r < rows; ++r) {
        int arg = 0;
        double m = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
          const double v = (z.row(r) - centers.row(c)).squaredNorm();
          if (v < m) {
            m = v;
            arg = c;
          }
        }
        inertia += m;
        if (assign[r] != arg) {
          assign[r] = arg;
          changed = true;
        }
      }
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, q);
      std::vector<int> size(k, 0);
      for (long r = 0; r < rows; ++r) {
        sum.row(assign[r]) += z.row(r);
        ++size[assign[r]];
      }
      for (int c = 0; c < k; ++c)
        if (size[c] > 0) centers.row(c) = sum.row(c) / size[c];
      if (!changed) break;
    }
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_assign = assign;
    }
  }

  // Clusters to states: the endings of each label pick the absorbing states; the remaining
  // clusters become transient states in order of how often they occur in catastrophic episodes.
  std::vector<std::vector<double>> end_count(2, std::vector<double>(k, 0.0));
  std::vector<double> cat_share(k, 0.0), members(k, 0.0);
  for (std::size_t d = 0; d < episodes.size(); ++d) {
    if (last_row[d] < 0) continue;
    const int side = episodes[d].label == 0 ? 0 : 1;
    end_count[side][best_assign[last_row[d]]] += 1.0;
  }
  for (long r = 0; r < rows; ++r) {
    members[best_assign[r]] += 1.0;
    if (episodes[owner[r]].label != 0) cat_share[best_assign[r]] += 1.0;
  }
  for (int c = 0; c < k; ++c) cat_share[c] = members[c] > 0.0 ? cat_share[c] / members[c] : 0.0;
  std::vector<int> cluster_of(n_states, -1);
  std::vector<bool> used(k, false);
  auto pick_end = [&](int side) {
    int arg = -1;
    for (int c = 0; c < k; ++c)
      if (!used[c] && (arg < 0 || end_count[side][c] > end_count[side][arg])) arg = c;
    used[arg] = true;
    return arg;
  };
  cluster_of[0] = pick_end(0);
  cluster_of[n_states - 1] = pick_end(1);
  std::vector<int> rest;
  for (int c = 0; c < k; ++c)
    if (!used[c]) rest.push_back(c);
  std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) { return cat_share[a] < cat_share[b]; });
  for (int i = 1; i + 1 < n_states; ++i) cluster_of[i] = rest[i - 1];

  const double zeta = estimate_intensity(episodes);
  const double gap = 1.0 / zeta;
  ParameterSet p;
  p.n_states = n_states;
  p.zeta = zeta;
  p.sojourn.assign(n_states, {2.0, 2.0 / (5.0 * gap)});
  p.initial = Eigen::VectorXd::Zero(n_states);
  for (int i = 1; i + 1 < n_states; ++i) p.initial[i] = 1.0 / (n_states - 2);
  p.eta = Eigen::MatrixXd::Zero(n_states, n_states);
  p.beta = Eigen::MatrixXd::Zero(n_states, n_states);
  Eigen::MatrixXd pooled = ((x.rowwise() - mean.transpose()).transpose() * (x.rowwise() - mean.transpose())) / rows;
  const double rho = 0.1;
  for (int i = 0; i < n_states; ++i) {
    const int c = cluster_of[i];
    Eigen::VectorXd m = Eigen::VectorXd::Zero(q);
    int size = 0;
    for (long r = 0; r < rows; ++r)
      if (best_assign[r] == c) {
        m += x.row(r).transpose();
        ++size;
      }
    Eigen::MatrixXd cov = pooled;
    if (size > 0) m /= size;
    else m = mean;
    if (size > q + 1) {
      cov.setZero();
      for (long r = 0; r < rows; ++r)
        if (best_assign[r] == c) cov += (x.row(r).transpose() - m) * (x.row(r).transpose() - m).transpose();
      cov /= size;
    }
    const double md = std::max(cov.diagonal().mean(), 1e-12);
    GpHyper h;
    h.mean = m;
    h.task_cov = cov / md + 1e-6 * Eigen::MatrixXd::Identity(q, q);
    h.sigma = std::sqrt(md / (1.0 + rho));
    h.length_scale = 3.0 * gap;
    h.jitter = rho * h.sigma * h.sigma;
    p.emission.push_back(h);
  }
  validate(p);
  return p;
}

LearnResult ffbs_mcem(const std::vector<Episode>& episodes, const ParameterSet& init, const LearnConfig& cfg) {
  require(!episodes.empty(), ErrorKind::MalformedInput, "learn: no episodes");
  require(cfg.samples >= 1 && cfg.max_iter >= 0, ErrorKind::InvalidParameters, "learn: bad configuration");
  validate(init);
  for (const auto& e : episodes) validate(e, init);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  LearnResult res;
  ParameterSet p = init;
  p.zeta = estimate_intensity(episodes);
  res.initial = p;
  std::uint64_t stream = 0;
  auto sample_set = std::make_unique<SampleSet>(episodes, draw_paths(p, episodes, cfg, stream), p);

  IterationRecord first;
  first.iter = 0;
  {
    const auto w = sample_set->weights(p);
    first.objective = first.objective_prev = sample_set->objective(p, w);
    first.min_ess = sample_set->min_ess(w);
  }
  first.loglik = cfg.track_loglik ? observed_log_likelihood(p, episodes, cfg) : std::numeric_limits<double>::quiet_NaN();
  first.wall_time = elapsed();
  res.trace.push_back(first);
  spdlog::info("learn: iter 0 objective {:.4f} loglik {:.4f}", first.objective, first.loglik);

  for (int z = 1; z <= cfg.max_iter; ++z) {
    IterationRecord rec;
    rec.iter = z;
    auto w = sample_set->weights(p);
    rec.min_ess = sample_set->min_ess(w);
    if (cfg.ess_refresh && z > 1 && rec.min_ess < 0.5 * cfg.samples) {
      ++stream;
      sample_set = std::make_unique<SampleSet>(episodes, draw_paths(p, episodes, cfg, stream), p);
      w = sample_set->weights(p);
      rec.min_ess = sample_set->min_ess(w);
      rec.refreshed = true;
    }
    MStepReport rep;
    const ParameterSet next = m_step(*sample_set, w, p, &rep);
    rec.objective_prev = rep.before;
    rec.objective = rep.after;
    rec.reverted = rep.reverted;
    const double change = max_relative_change(p, next);
    p = next;
    rec.loglik = cfg.track_loglik ? observed_log_likelihood(p, episodes, cfg) : std::numeric_limits<double>::quiet_NaN();
    rec.wall_time = elapsed();
    res.trace.push_back(rec);
    spdlog::info("learn: iter {} objective {:.4f} -> {:.4f} loglik {:.4f} min ESS {:.1f}{}", z, rec.objective_prev,
                 rec.objective, rec.loglik, rec.min_ess, rec.refreshed ? " (refreshed)" : "");
    if (change <= cfg.epsilon) {
      res.converged = true;
      break;
    }
  }
  res.params = canonical_relabel(p);
  res.loglik = cfg.track_loglik ? res.trace.back().loglik : observed_log_likelihood(res.params, episodes, cfg);
  return res;
}

ParameterSet permute_states(const ParameterSet& p, const std::vector<int>& perm) {
  const int n = p.n_states;
  require(static_cast<int>(perm.size()) == n, ErrorKind::InvalidParameters, "permutation has wrong length");
  ParameterSet out = p;
  for (int a = 0; a < n; ++a) {
    out.sojourn[a] = p.sojourn[perm[a]];
    out.initial[a] = p.initial[perm[a]];
    out.emission[a] = p.emission[perm[a]];
    for (int b = 0; b < n; ++b) {
      out.eta(a, b) = p.eta(perm[a], perm[b]);
      out.beta(a, b) = p.beta(perm[a], perm[b]);
    }
  }
  return out;
}

ParameterSet canonical_relabel(const ParameterSet& p) {
  const Eigen::VectorXd absorb = absorption_probabilities(p);
  std::vector<int> perm(p.n_states);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin() + 1, perm.end() - 1, [&](int a, int b) { return absorb[a] < absorb[b]; });
  return permute_states(p, perm);
}

int parameter_count(const ParameterSet& p) {
  const int n = p.n_states;
  const int q = p.n_streams();
  const int initial = n - 1;
  const int sojourn = 2 * n;
  const int transition = (n - 2) * 2 * (n - 2);  // per transient row: n-1 targets, one fixed by the shift
  const int emission = n * (q + q * (q + 1) / 2 - 1 + 3);  // means, task_cov (scale fixed), sigma, ell, jitter
  return initial + sojourn + transition + emission;
}

double bic_score(double loglik, int params, long observations) {
  return -2.0 * loglik + params * std::log(static_cast<double>(std::max(observations, 1L)));
}

BicResult bic_select(const std::vector<Episode>& episodes, const std::vector<int>& candidates, const LearnConfig& cfg) {
  require(!candidates.empty(), ErrorKind::InvalidParameters, "bic: no candidates");
  long obs = 0;
  for (const auto& e : episodes) obs += e.size();
  BicResult out;
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> order = candidates;
  std::sort(order.begin(), order.end());
  for (int n : order) {
    BicCandidate c;
    c.n_states = n;
    try {
      const auto data = retarget_labels(episodes, n);
      const ParameterSet init = initial_guess(data, n, cfg);
      LearnConfig sub = cfg;
      sub.track_loglik = false;
      const LearnResult fit = ffbs_mcem(data, init, sub);
      c.params = fit.params;
      c.loglik = fit.loglik;
      c.bic = bic_score(c.loglik, parameter_count(c.params), obs);
      if (c.bic < best) {
        best = c.bic;
        out.n_states = n;
        out.params = c.params;
      }
    } catch (const Error& e) {
      c.failed = true;
      c.error = e.what();
      spdlog::warn("bic: candidate N={} skipped: {}", n, e.what());
    }
    out.candidates.push_back(c);
  }
  require(out.n_states > 0, ErrorKind::Convergence, "bic: every candidate failed");
  return out;
}

}  // namespace hasmm
