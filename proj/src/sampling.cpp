#include "hasmm/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/special_functions/gamma.hpp>

#include "hasmm/error.hpp"

namespace hasmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

// Candidate predecessor in a backward step: either the initial visit (entry at 0) or an entry
// inside a piece. Weights are proposal masses.
struct Candidate {
  int state;
  int piece;  // -1 for the initial visit
  double lo, hi;  // sojourn range for pieces
  double log_w;
};

}  // namespace

double truncated_gamma(const ParameterSet& p, int state, double lo, double hi, Rng& rng) {
  require(lo >= 0.0 && hi > lo, ErrorKind::InvalidParameters, "truncated_gamma: need 0 <= lo < hi");
  const auto& g = p.sojourn[state];
  const double a = g.rate * lo;
  const double b = std::isfinite(hi) ? g.rate * hi : std::numeric_limits<double>::infinity();
  const double u = rng.uniform_open();
  double x;
  const double p_lo = boost::math::gamma_p(g.shape, a);
  if (p_lo < 0.5) {
    const double p_hi = std::isfinite(b) ? boost::math::gamma_p(g.shape, b) : 1.0;
    const double target = p_lo + u * (p_hi - p_lo);
    if (!(p_hi > p_lo) || target <= 0.0) return 0.5 * (lo + std::min(hi, lo + 1.0));
    x = target >= 1.0 ? b : boost::math::gamma_p_inv(g.shape, target);
  } else {
    // Upper tail: work with survival values to keep precision.
    const double q_lo = boost::math::gamma_q(g.shape, a);
    const double q_hi = std::isfinite(b) ? boost::math::gamma_q(g.shape, b) : 0.0;
    const double target = q_lo - u * (q_lo - q_hi);
    if (!(q_lo > q_hi) || target <= 0.0) return std::isfinite(hi) ? 0.5 * (lo + hi) : lo;
    x = boost::math::gamma_q_inv(g.shape, target);
  }
  return std::clamp(x / g.rate, lo, std::nextafter(hi, lo));
}

double tr_sampler(const ParameterSet& p, int state, double s_bar, Rng& rng) {
  require(s_bar > 0.0, ErrorKind::InvalidParameters, "tr_sampler: truncation point must be positive");
  const auto& g = p.sojourn[state];
  if (!std::isfinite(s_bar)) return rng.gamma(g.shape, g.rate);
  if (sojourn_cdf(p, state, s_bar) < 0.01) return truncated_gamma(p, state, 0.0, s_bar, rng);
  for (;;) {
    const double s = rng.gamma(g.shape, g.rate);
    if (s < s_bar) return s;
  }
}

BarDraw bar_sampler(const Eigen::VectorXd& alpha, const ParameterSet& p, int next, double s_bar, Rng& rng,
                    long max_proposals) {
  require(s_bar > 0.0, ErrorKind::InvalidParameters, "bar_sampler: truncation point must be positive");
  require(alpha.size() == p.n_states, ErrorKind::InvalidParameters, "bar_sampler: message row has wrong length");
  std::vector<double> weights(alpha.data(), alpha.data() + alpha.size());
  std::vector<double> row(p.n_states);
  BarDraw out;
  while (out.proposals < max_proposals) {
    ++out.proposals;
    const int u = rng.categorical(weights);
    if (u < 0) break;
    const double w = tr_sampler(p, u, s_bar, rng);
    for (int j = 0; j < p.n_states; ++j) row[j] = transition_fn(p, u, j, w);
    if (rng.categorical(row) == next) {
      out.state = u;
      out.duration = w;
      return out;
    }
  }
  throw Error(ErrorKind::Numerical, "bar_sampler: no accepted proposal after " + std::to_string(out.proposals) +
                                        " draws (next state " + std::to_string(next + 1) + ")");
}

// ---------------------------------------------------------------------------
// Entry pass

EntryPass::EntryPass(const ParameterSet& p, const Kernel& kernel, const Episode& e, const EntryPassOptions& opt)
    : p_(&p), kernel_(&kernel), opt_(opt), horizon_(e.censor_time), times_(e.times) {
  for (int j = 0; j < p.n_states; ++j) caches_.emplace_back(p.emission[j], e.times, e.values, opt.emission_window);
  run();
}

EntryPass::EntryPass(const ParameterSet& p, const Kernel& kernel, double horizon, const EntryPassOptions& opt)
    : p_(&p), kernel_(&kernel), opt_(opt), horizon_(horizon) {
  for (int j = 0; j < p.n_states; ++j) caches_.emplace_back(p.emission[j], opt.emission_window);
  run();
}

int EntryPass::count_before(double t) const {
  return static_cast<int>(std::lower_bound(times_.begin(), times_.end(), t) - times_.begin());
}

void EntryPass::run() {
  require(opt_.step > 0.0, ErrorKind::InvalidParameters, "entry pass: step must be positive");
  require(horizon_ > 0.0 && std::isfinite(horizon_), ErrorKind::MalformedInput, "entry pass: bad horizon");
  const ParameterSet& p = *p_;
  const int n = p.n_states;
  const double h = opt_.step;
  const int cells = std::max(1, static_cast<int>(std::ceil(horizon_ / h - 1e-9)));

  // Pieces: grid cells split at observation times.
  pieces_.clear();
  std::size_t next_obs = 0;
  for (int c = 0; c < cells; ++c) {
    const double lo = c * h;
    const double hi = std::min((c + 1) * h, horizon_);
    while (next_obs < times_.size() && times_[next_obs] <= lo) ++next_obs;
    double start = lo;
    while (next_obs < times_.size() && times_[next_obs] < hi) {
      if (times_[next_obs] > start) {
        pieces_.push_back({start, times_[next_obs], 0, c});
        start = times_[next_obs];
      }
      ++next_obs;
    }
    if (hi > start) pieces_.push_back({start, hi, 0, c});
  }
  for (auto& pc : pieces_) pc.first = static_cast<int>(std::upper_bound(times_.begin(), times_.end(), pc.lo) - times_.begin());

  const int np = static_cast<int>(pieces_.size());
  log_rho_.assign(n, std::vector<double>(np, kNegInf));
  std::vector<double> known(n);
  Eigen::MatrixXd couple(n, n);  // couple(u, j)
  Eigen::VectorXd base(n), rho(n);

  for (int q = 0; q < np; ++q) {
    const Piece& cur = pieces_[q];
    const double t = 0.5 * (cur.lo + cur.hi);
    const int before = cur.first;  // no observation lies strictly inside a piece

    // Entry density at the piece midpoint from the initial visit and from earlier pieces.
    std::fill(known.begin(), known.end(), kNegInf);
    for (int u = 0; u < n; ++u) {
      if (p.is_absorbing(u)) continue;
      const double e0 = p.initial[u] > 0.0
                            ? std::log(p.initial[u]) + sojourn_log_pdf(p, u, t) + log_emission(u, 0, before)
                            : kNegInf;
      for (int j = 0; j < n; ++j) {
        if (j == u) continue;
        double acc = e0 == kNegInf ? kNegInf : e0 + log_transition_fn(p, u, j, t);
        for (int k = 0; k < q; ++k) {
          const double lr = log_rho_[u][k];
          if (lr == kNegInf) continue;
          const Piece& pc = pieces_[k];
          const double dk = kernel_->kernel(u, j, t - pc.lo) - kernel_->kernel(u, j, t - pc.hi);
          if (dk <= 0.0) continue;
          acc = log_add(acc, lr + log_emission(u, pc.first, before) + std::log(dk));
        }
        known[j] = log_add(known[j], acc);
      }
    }
    double scale = kNegInf;
    for (double v : known) scale = std::max(scale, v);
    if (scale == kNegInf) continue;
    // Entries earlier in the same piece feed back linearly; a few sweeps settle them since the
    // coupling is at most V(h/2).
    couple.setZero();
    for (int u = 0; u < n; ++u) {
      if (p.is_absorbing(u)) continue;
      for (int j = 0; j < n; ++j)
        if (j != u) couple(u, j) = kernel_->kernel(u, j, t - cur.lo);
    }
    for (int j = 0; j < n; ++j) base[j] = known[j] == kNegInf ? 0.0 : std::exp(known[j] - scale);
    rho = base;
    for (int it = 0; it < 4; ++it) rho = base + couple.transpose() * rho;
    for (int j = 0; j < n; ++j) log_rho_[j][q] = rho[j] > 0.0 ? std::log(rho[j]) + scale : kNegInf;
  }
}

double EntryPass::log_likelihood(double censor_time, int label) const {
  const ParameterSet& p = *p_;
  require(censor_time <= horizon_ + 1e-9, ErrorKind::InvalidParameters, "entry pass: censor time beyond horizon");
  const int m = count_before(std::numeric_limits<double>::infinity());
  double acc = kNegInf;
  if (p.initial[label] > 0.0)
    acc = std::log(p.initial[label]) + sojourn_log_pdf(p, label, censor_time) + log_emission(label, 0, m);
  for (std::size_t k = 0; k < pieces_.size(); ++k) {
    const Piece& pc = pieces_[k];
    if (pc.lo >= censor_time) break;
    const double lr = log_rho_[label][k];
    if (lr == kNegInf) continue;
    const double top = std::min(pc.hi, censor_time);
    const double mass = sojourn_cdf(p, label, censor_time - pc.lo) - sojourn_cdf(p, label, censor_time - top);
    if (mass <= 0.0) continue;
    acc = log_add(acc, lr + log_emission(label, pc.first, m) + std::log(mass));
  }
  return acc;
}

double EntryPass::initiality_probability(int next, double tau) const {
  const ParameterSet& p = *p_;
  const int before = count_before(tau);
  double init = kNegInf, cont = kNegInf;
  for (int u = 0; u < p.n_states; ++u) {
    if (p.is_absorbing(u) || u == next) continue;
    if (p.initial[u] > 0.0)
      init = log_add(init, std::log(p.initial[u]) + sojourn_log_pdf(p, u, tau) + log_transition_fn(p, u, next, tau) +
                               log_emission(u, 0, before));
    for (std::size_t k = 0; k < pieces_.size(); ++k) {
      const Piece& pc = pieces_[k];
      if (pc.lo >= tau) break;
      const double lr = log_rho_[u][k];
      if (lr == kNegInf) continue;
      const double dk = kernel_->kernel(u, next, tau - pc.lo) - kernel_->kernel(u, next, tau - std::min(pc.hi, tau));
      if (dk > 0.0) cont = log_add(cont, lr + log_emission(u, pc.first, before) + std::log(dk));
    }
  }
  if (init == kNegInf && cont == kNegInf)
    throw Error(ErrorKind::Numerical, "initiality probability: no path reaches the entry at t=" + std::to_string(tau));
  if (init == kNegInf) return 0.0;
  if (cont == kNegInf) return 1.0;
  return 1.0 / (1.0 + std::exp(cont - init));
}

// ---------------------------------------------------------------------------
// Backward sampling

Trajectory backward_sample(const EntryPass& pass, double censor_time, int label, Rng& rng, BackwardStats* stats,
                           int max_steps, long max_proposals) {
  const ParameterSet& p = pass.params();
  const int n = p.n_states;
  require(p.is_absorbing(label), ErrorKind::MalformedInput, "backward sampling: label must be an absorbing state");
  require(censor_time > 0.0 && censor_time <= pass.horizon() + 1e-9, ErrorKind::MalformedInput,
          "backward sampling: censor time outside the entry pass horizon");
  const auto& pieces = pass.pieces();
  const int m = pass.count_before(std::numeric_limits<double>::infinity());

  std::vector<int> states{label};
  std::vector<double> sojourns;
  std::vector<Candidate> cand;
  std::vector<double> weights;
  long proposals = 0;

  // Entry time of the absorbing state, then predecessors one at a time.
  int current = label;
  double exit = censor_time;
  bool last = true;
  for (int step = 0;; ++step) {
    if (step >= max_steps)
      throw Error(ErrorKind::Convergence, "backward sampling exceeded " + std::to_string(max_steps) + " steps");
    const double tau = exit;
    const int seg_end = last ? m : pass.count_before(tau);
    cand.clear();
    for (int u = 0; u < n; ++u) {
      if (last ? u != label : (p.is_absorbing(u) || u == current)) continue;
      if (p.initial[u] > 0.0) {
        const double lw = std::log(p.initial[u]) + sojourn_log_pdf(p, u, tau) + pass.log_emission(u, 0, seg_end);
        if (lw > kNegInf) cand.push_back({u, -1, tau, tau, lw});
      }
      for (std::size_t k = 0; k < pieces.size(); ++k) {
        const auto& pc = pieces[k];
        if (pc.lo >= tau) break;
        const double lr = pass.log_rho(u, static_cast<int>(k));
        if (lr == kNegInf) continue;
        const double top = std::min(pc.hi, tau);
        const double mass = sojourn_cdf(p, u, tau - pc.lo) - sojourn_cdf(p, u, tau - top);
        if (mass <= 0.0) continue;
        cand.push_back({u, static_cast<int>(k), tau - top, tau - pc.lo,
                        lr + pass.log_emission(u, pc.first, seg_end) + std::log(mass)});
      }
    }
    if (cand.empty())
      throw Error(ErrorKind::Numerical, "backward sampling: no predecessor can explain the entry at t=" +
                                            std::to_string(tau));
    double mx = kNegInf;
    for (const auto& c : cand) mx = std::max(mx, c.log_w);
    weights.resize(cand.size());
    for (std::size_t k = 0; k < cand.size(); ++k) weights[k] = std::exp(cand[k].log_w - mx);

    // Proposals ignore the transition factor g_{u,current}(w); accepting with that probability
    // restores it. The absorbing visit has no successor, so its draws are exact.
    long tries = 0;
    int chosen = -1;
    double w = 0.0;
    for (;;) {
      if (++tries > max_proposals)
        throw Error(ErrorKind::Numerical, "backward sampling: acceptance rate collapsed at t=" + std::to_string(tau));
      const int k = rng.categorical(weights);
      const Candidate& c = cand[k];
      w = c.piece < 0 ? tau : truncated_gamma(p, c.state, c.lo, c.hi, rng);
      if (last || rng.uniform() < transition_fn(p, c.state, current, w)) {
        chosen = k;
        break;
      }
    }
    proposals += tries;
    const Candidate& c = cand[chosen];
    if (last) {
      sojourns.push_back(w);
    } else {
      states.push_back(c.state);
      sojourns.push_back(w);
    }
    if (c.piece < 0) break;
    current = c.state;
    exit = tau - w;
    last = false;
  }
  if (stats) {
    stats->proposals += proposals;
    stats->steps += static_cast<int>(states.size());
  }
  Trajectory x;
  x.states.assign(states.rbegin(), states.rend());
  x.sojourns.assign(sojourns.rbegin(), sojourns.rend());
  // Entry times were built by subtraction; pin the total to the censor time.
  double total = 0.0;
  for (std::size_t k = 1; k < x.sojourns.size(); ++k) total += x.sojourns[k];
  x.sojourns[0] = std::max(censor_time - total, 0.0);
  return x;
}

std::vector<std::pair<int, int>> visit_ranges(const Trajectory& x, const std::vector<double>& times) {
  std::vector<std::pair<int, int>> out;
  double entry = 0.0;
  const int m = static_cast<int>(times.size());
  for (std::size_t k = 0; k < x.states.size(); ++k) {
    const int a = first_at_or_after(times, entry);
    entry += x.sojourns[k];
    const int b = k + 1 == x.states.size() ? m : first_at_or_after(times, entry);
    out.emplace_back(a, std::max(a, b));
  }
  return out;
}

CompleteLogDensity complete_log_density(const ParameterSet& p, const Episode& e, const Trajectory& x) {
  CompleteLogDensity out;
  const std::size_t k = x.states.size();
  out.initial = safe_log(p.initial[x.states[0]]);
  const auto ranges = visit_ranges(x, e.times);
  for (std::size_t n = 0; n < k; ++n) {
    const int s = x.states[n];
    out.sojourn += sojourn_log_pdf(p, s, x.sojourns[n]);
    if (n + 1 < k) out.transition += log_transition_fn(p, s, x.states[n + 1], x.sojourns[n]);
    const auto [a, b] = ranges[n];
    if (b > a) {
      Segment seg;
      seg.times.assign(e.times.begin() + a, e.times.begin() + b);
      seg.values = e.values.middleRows(a, b - a);
      out.emission += segment_log_density(p.emission[s], seg);
    }
  }
  return out;
}

}  // namespace hasmm
