#include "hasmm/filter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hasmm/error.hpp"

namespace hasmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Messages below this normalized log mass do not count towards saturation diagnostics.
constexpr double kNegligible = -13.8;

double log_sum_exp(const std::vector<double>& xs) {
  double mx = kNegInf;
  for (double x : xs) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

}  // namespace

json snapshot_to_json(const PosteriorSnapshot& s) {
  std::vector<double> post(s.posterior.data(), s.posterior.data() + s.posterior.size());
  json j;
  j["id"] = s.id;
  j["t"] = s.t;
  j["posterior"] = post;
  j["map_state"] = s.map_state + 1;
  j["risk"] = s.risk;
  return j;
}

PosteriorSnapshot snapshot_from_json(const json& j) {
  PosteriorSnapshot s;
  try {
    s.id = j.at("id").get<std::string>();
    s.t = j.at("t").get<double>();
    const auto post = j.at("posterior").get<std::vector<double>>();
    s.posterior = Eigen::Map<const Eigen::VectorXd>(post.data(), static_cast<long>(post.size()));
    s.map_state = j.at("map_state").get<int>() - 1;
    s.risk = j.at("risk").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("risk").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedInput, std::string("posterior snapshot: ") + e.what());
  }
  return s;
}

ForwardFilter::ForwardFilter(const ParameterSet& p, const TransitionTable& table, const FilterOptions& opt)
    : p_(p), table_(&table), opt_(opt) {
  validate(p_);
  require(table.n_states() == p_.n_states, ErrorKind::InvalidParameters, "table and parameters disagree on N");
  if (table.fingerprint != table_fingerprint(p_, table.grid()))
    throw Error(ErrorKind::FingerprintMismatch, "transition table was built from different parameters");
  horizon_ = std::numeric_limits<double>::infinity();
  if (opt_.lag_quantile < 1.0) {
    horizon_ = max_sojourn_quantile(p_, opt_.lag_quantile, true);
  }
  if (opt_.compute_risk) absorb_ = absorption_row(table);
  reset();
}

void ForwardFilter::reset(const std::string& id) {
  id_ = id;
  times_.clear();
  steps_.clear();
  caches_.clear();
  for (int j = 0; j < p_.n_states; ++j) caches_.emplace_back(p_.emission[j], opt_.emission_window);
  loglik_ = 0.0;
  saturated_ = 0;
}

bool ForwardFilter::emission_fallback() const {
  return std::any_of(caches_.begin(), caches_.end(), [](const auto& c) { return c.used_fallback(); });
}

double ForwardFilter::fresh(int i, int j, double tau, double lo, double hi, bool count) {
  bool saturated = false;
  double v = table_->interpolate(i, j, tau, lo, hi, &saturated);
  // Absorbing rows are constant, so clamping them loses nothing.
  if (count && saturated && !p_.is_absorbing(i)) ++saturated_;
  if (i == j) v -= table_->interpolate_stay(i, tau, lo, hi);
  return std::max(v, 0.0);
}

// P(visit of j survives to `now` | it survived to `ref`), entry uniform over [entry_lo, entry_hi].
double ForwardFilter::window_survival(int j, double entry_lo, double entry_hi, double now, double ref) const {
  if (p_.is_absorbing(j)) return 1.0;
  if (entry_hi - entry_lo <= 1e-12) {
    const double den = sojourn_sf(p_, j, ref - entry_lo);
    return den > 0.0 ? sojourn_sf(p_, j, now - entry_lo) / den : 0.0;
  }
  const double den = integrated_survival(p_, j, ref - entry_lo) - integrated_survival(p_, j, ref - entry_hi);
  if (!(den > 0.0)) return 0.0;
  const double num = integrated_survival(p_, j, now - entry_lo) - integrated_survival(p_, j, now - entry_hi);
  return std::clamp(num / den, 0.0, 1.0);
}

PosteriorSnapshot ForwardFilter::push(double t, const Eigen::RowVectorXd& y) {
  if (!std::isfinite(t) || t < 0.0 || (!times_.empty() && t < times_.back()))
    throw Error(ErrorKind::MalformedInput, "observation times must be finite, non-negative and sorted");
  times_.push_back(t);
  for (auto& c : caches_) c.push(t, y);
  const int n = p_.n_states;
  const int m = size();
  auto tt = [&](int k) { return k == 0 ? 0.0 : times_[k - 1]; };

  // Entry windows (t_{m-w}, t_{m-w+1}] for w <= W are kept separately; older ones are merged.
  int W = 1;
  while (W + 1 <= m && tt(m) - tt(m - W) <= horizon_) ++W;
  const int direct = std::min(W, m - 1);

  Step step;
  auto& msgs = step.msgs;

  // Still in the initial visit.
  for (int j = 0; j < n; ++j) {
    if (!(p_.initial[j] > 0.0)) continue;
    const double sf = sojourn_sf(p_, j, tt(m));
    if (!(sf > 0.0)) continue;
    msgs.push_back({j, 0.0, 0.0, true, std::log(p_.initial[j]) + std::log(sf) + caches_[j].log_density(0, m)});
  }

  // Visits that began between two observations. The log mass entering j inside (t_{z}, t_{z+1}]
  // does not depend on m, so it is computed once, when observation z+1 arrives, and reused.
  step.entry.assign(n, kNegInf);
  if (m >= 2) {
    const Step& from = steps_[m - 2];
    const double gap = tt(m) - tt(m - 1);
    std::vector<double> terms;
    for (int j = 0; j < n; ++j) {
      terms.clear();
      for (const Message& mu : from.msgs) {
        const double lo = tt(m - 1) - mu.entry_hi;
        const double hi = tt(m - 1) - mu.entry_lo;
        const double f = fresh(mu.state, j, gap, lo, hi, mu.log_alpha > kNegligible);
        if (f > 0.0) terms.push_back(mu.log_alpha + from.log_evidence + std::log(f));
      }
      if (!terms.empty()) step.entry[j] = log_sum_exp(terms);
    }
  }
  for (int w = 1; w <= direct; ++w) {
    const int z = m - w;
    const std::vector<double>& entry = w == 1 ? step.entry : steps_[z].entry;
    for (int j = 0; j < n; ++j) {
      if (entry[j] == kNegInf) continue;
      const double s = window_survival(j, tt(z), tt(z + 1), tt(m), tt(z + 1));
      if (!(s > 0.0)) continue;
      msgs.push_back({j, tt(z), tt(z + 1), false, entry[j] + std::log(s) + caches_[j].log_density(z, m)});
    }
  }

  if (W >= m) {
    // Left the initial state and entered j before the first observation.
    for (int j = 0; j < n; ++j) {
      double pr = 0.0;
      for (int i = 0; i < n; ++i)
        if (p_.initial[i] > 0.0) pr += p_.initial[i] * fresh(i, j, tt(1), 0.0, 0.0, true);
      if (!(pr > 0.0)) continue;
      const double s = window_survival(j, 0.0, tt(1), tt(m), tt(1));
      if (!(s > 0.0)) continue;
      msgs.push_back({j, 0.0, tt(1), false, std::log(pr) + std::log(s) + caches_[j].log_density(0, m)});
    }
  } else {
    // Windows older than the horizon: carry the previous step forward (the visit persists) and
    // condition the new observation on the recent part of the visit only.
    const double cutoff = tt(m - W);
    const Step& prev = steps_[m - 2];
    const int first = std::max(m - W, m - opt_.emission_window);
    std::vector<double> terms;
    for (int j = 0; j < n; ++j) {
      terms.clear();
      for (const Message& mu : prev.msgs) {
        if (mu.state != j || mu.initial || mu.entry_hi > cutoff + 1e-12) continue;
        const double s = window_survival(j, mu.entry_lo, mu.entry_hi, tt(m), tt(m - 1));
        if (s > 0.0) terms.push_back(mu.log_alpha + prev.log_evidence + std::log(s));
      }
      if (terms.empty()) continue;
      const double cond = caches_[j].log_density(first - 1, m) - caches_[j].log_density(first - 1, m - 1);
      msgs.push_back({j, 0.0, cutoff, false, log_sum_exp(terms) + cond});
    }
  }

  std::vector<double> all;
  all.reserve(msgs.size());
  for (const auto& mu : msgs) all.push_back(mu.log_alpha);
  const double total = log_sum_exp(all);
  if (!std::isfinite(total))
    throw Error(ErrorKind::Numerical, "forward messages vanished at observation " + std::to_string(m) +
                                          " (t=" + std::to_string(t) + ")");
  PosteriorSnapshot snap;
  snap.id = id_;
  snap.t = t;
  snap.posterior = Eigen::VectorXd::Zero(n);
  for (auto& mu : msgs) {
    mu.log_alpha -= total;
    snap.posterior[mu.state] += std::exp(mu.log_alpha);
  }
  snap.posterior /= snap.posterior.sum();
  step.log_evidence = total;
  loglik_ = total;
  steps_.push_back(std::move(step));
  snap.posterior.maxCoeff(&snap.map_state);
  snap.risk = opt_.compute_risk ? risk_score(snap.posterior, absorb_) : std::numeric_limits<double>::quiet_NaN();
  return snap;
}

std::vector<PosteriorSnapshot> run_filter(const ParameterSet& p, const TransitionTable& table, const Episode& e,
                                          const FilterOptions& opt) {
  ForwardFilter f(p, table, opt);
  f.reset(e.id);
  std::vector<PosteriorSnapshot> out;
  out.reserve(e.times.size());
  for (int k = 0; k < e.size(); ++k) out.push_back(f.push(e.times[k], e.values.row(k)));
  return out;
}

double risk_score(const Eigen::VectorXd& posterior, const Eigen::VectorXd& absorption) {
  return std::clamp(posterior.dot(absorption), 0.0, 1.0);
}

}  // namespace hasmm
