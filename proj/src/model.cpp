#include "hasmm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <boost/math/special_functions/gamma.hpp>

#include "hasmm/error.hpp"

namespace hasmm {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParameters: return "invalid_parameters";
    case ErrorKind::MalformedInput: return "malformed_input";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Convergence: return "convergence";
    case ErrorKind::FingerprintMismatch: return "fingerprint_mismatch";
    case ErrorKind::Io: return "io";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

namespace {

void bad(const std::string& msg) { throw Error(ErrorKind::InvalidParameters, msg); }

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) bad(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!ok.count(it.key())) bad(where + ": unknown key '" + it.key() + "'");
  }
}

const json& field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) bad(where + ": missing key '" + key + "'");
  return *it;
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) bad(where + ": expected a number");
  return v.get<double>();
}

Eigen::VectorXd vector_of(const json& v, const std::string& where) {
  if (!v.is_array()) bad(where + ": expected an array");
  Eigen::VectorXd out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = number(v[k], where);
  return out;
}

Eigen::MatrixXd matrix_of(const json& v, const std::string& where) {
  if (!v.is_array() || v.empty()) bad(where + ": expected a non-empty array of rows");
  const std::size_t rows = v.size();
  const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
  Eigen::MatrixXd out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!v[r].is_array() || v[r].size() != cols) bad(where + ": ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = number(v[r][c], where);
  }
  return out;
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

json vector_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (int k = 0; k < v.size(); ++k) out.push_back(v[k]);
  return out;
}

}  // namespace

void validate(const GpHyper& h) {
  const int q = h.n_streams();
  if (q < 1) bad("emission: mean must have at least one stream");
  if (!h.mean.allFinite()) bad("emission: non-finite mean");
  if (!(h.sigma > 0.0) || !std::isfinite(h.sigma)) bad("emission: sigma must be positive");
  if (!(h.length_scale > 0.0) || !std::isfinite(h.length_scale)) bad("emission: length_scale must be positive");
  if (!(h.jitter >= 0.0) || !std::isfinite(h.jitter)) bad("emission: jitter must be non-negative");
  if (h.task_cov.rows() != q || h.task_cov.cols() != q) bad("emission: task_cov must be Q x Q");
  if (!h.task_cov.allFinite()) bad("emission: non-finite task_cov");
  if ((h.task_cov - h.task_cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + h.task_cov.cwiseAbs().maxCoeff()))
    bad("emission: task_cov must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h.task_cov);
  if (es.eigenvalues().minCoeff() < -1e-9 * (1.0 + es.eigenvalues().cwiseAbs().maxCoeff()))
    bad("emission: task_cov must be positive semidefinite");
}

void validate(const ParameterSet& p) {
  const int n = p.n_states;
  if (n < 3) bad("n_states must be at least 3");
  if (static_cast<int>(p.sojourn.size()) != n) bad("sojourn must have n_states entries");
  for (int i = 0; i < n; ++i) {
    const auto& s = p.sojourn[i];
    if (!(s.shape > 0.0) || !std::isfinite(s.shape)) bad("sojourn[" + std::to_string(i + 1) + "]: shape must be positive");
    if (!(s.rate > 0.0) || !std::isfinite(s.rate)) bad("sojourn[" + std::to_string(i + 1) + "]: rate must be positive");
  }
  if (p.initial.size() != n) bad("initial must have n_states entries");
  if ((p.initial.array() < 0.0).any() || !p.initial.allFinite()) bad("initial must be non-negative");
  if (std::abs(p.initial.sum() - 1.0) > 1e-9) bad("initial must sum to 1");
  if (p.eta.rows() != n || p.eta.cols() != n) bad("eta must be N x N");
  if (p.beta.rows() != n || p.beta.cols() != n) bad("beta must be N x N");
  if (!p.eta.allFinite() || !p.beta.allFinite()) bad("eta and beta must be finite");
  if ((p.beta.array() < 0.0).any()) bad("beta must be non-negative");
  if (static_cast<int>(p.emission.size()) != n) bad("emission must have n_states entries");
  const int q = p.emission.front().n_streams();
  for (const auto& h : p.emission) {
    validate(h);
    if (h.n_streams() != q) bad("emission: every state must have the same number of streams");
  }
  if (!(p.zeta > 0.0) || !std::isfinite(p.zeta)) bad("zeta must be positive");
}

json to_json(const ParameterSet& p) {
  json j;
  j["n_states"] = p.n_states;
  json soj = json::array();
  for (const auto& s : p.sojourn) soj.push_back({{"shape", s.shape}, {"rate", s.rate}});
  j["sojourn"] = soj;
  j["initial"] = vector_json(p.initial);
  j["eta"] = matrix_json(p.eta);
  j["beta"] = matrix_json(p.beta);
  json em = json::array();
  for (const auto& h : p.emission) {
    em.push_back({{"mean", vector_json(h.mean)},
                  {"sigma", h.sigma},
                  {"length_scale", h.length_scale},
                  {"task_cov", matrix_json(h.task_cov)},
                  {"jitter", h.jitter}});
  }
  j["emission"] = em;
  j["zeta"] = p.zeta;
  return j;
}

ParameterSet params_from_json(const json& j) {
  check_keys(j, {"n_states", "sojourn", "initial", "eta", "beta", "emission", "zeta"}, "parameters");
  ParameterSet p;
  const json& n = field(j, "n_states", "parameters");
  if (!n.is_number_integer()) bad("n_states must be an integer");
  p.n_states = n.get<int>();
  const json& soj = field(j, "sojourn", "parameters");
  if (!soj.is_array()) bad("sojourn must be an array");
  for (const auto& s : soj) {
    check_keys(s, {"shape", "rate"}, "sojourn entry");
    p.sojourn.push_back({number(field(s, "shape", "sojourn"), "sojourn.shape"),
                         number(field(s, "rate", "sojourn"), "sojourn.rate")});
  }
  p.initial = vector_of(field(j, "initial", "parameters"), "initial");
  p.eta = matrix_of(field(j, "eta", "parameters"), "eta");
  p.beta = matrix_of(field(j, "beta", "parameters"), "beta");
  const json& em = field(j, "emission", "parameters");
  if (!em.is_array() || em.empty()) bad("emission must be a non-empty array");
  for (const auto& e : em) {
    check_keys(e, {"mean", "sigma", "length_scale", "task_cov", "jitter"}, "emission entry");
    GpHyper h;
    h.mean = vector_of(field(e, "mean", "emission"), "emission.mean");
    h.sigma = number(field(e, "sigma", "emission"), "emission.sigma");
    h.length_scale = number(field(e, "length_scale", "emission"), "emission.length_scale");
    h.task_cov = matrix_of(field(e, "task_cov", "emission"), "emission.task_cov");
    h.jitter = e.contains("jitter") ? number(e["jitter"], "emission.jitter") : 1e-6 * h.sigma * h.sigma;
    p.emission.push_back(std::move(h));
  }
  p.zeta = number(field(j, "zeta", "parameters"), "zeta");
  validate(p);
  return p;
}

ParameterSet load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open parameter file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedInput, "parameter file " + path + ": " + e.what());
  }
  return params_from_json(j);
}

void save_params(const ParameterSet& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  out << to_json(p).dump(2) << "\n";
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fingerprint(const ParameterSet& p) { return fnv1a(to_json(p).dump()); }

// ---------------------------------------------------------------------------
// Sojourn law

namespace {

void check_domain(const ParameterSet& p, int i, double s) {
  if (i < 0 || i >= p.n_states) bad("state index " + std::to_string(i) + " out of range");
  if (s < 0.0 || std::isnan(s)) bad("duration must be non-negative");
}

}  // namespace

double sojourn_pdf(const ParameterSet& p, int i, double s) {
  check_domain(p, i, s);
  const auto& g = p.sojourn[i];
  if (s == 0.0) {
    if (g.shape == 1.0) return g.rate;
    return g.shape < 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
  return std::exp(sojourn_log_pdf(p, i, s));
}

double sojourn_log_pdf(const ParameterSet& p, int i, double s) {
  check_domain(p, i, s);
  const auto& g = p.sojourn[i];
  if (s == 0.0) return std::log(sojourn_pdf(p, i, s));
  return g.shape * std::log(g.rate) + (g.shape - 1.0) * std::log(s) - g.rate * s - std::lgamma(g.shape);
}

double sojourn_cdf(const ParameterSet& p, int i, double s) {
  check_domain(p, i, s);
  if (s == 0.0) return 0.0;
  if (!std::isfinite(s)) return 1.0;
  return boost::math::gamma_p(p.sojourn[i].shape, p.sojourn[i].rate * s);
}

double sojourn_sf(const ParameterSet& p, int i, double s) {
  check_domain(p, i, s);
  if (s == 0.0) return 1.0;
  if (!std::isfinite(s)) return 0.0;
  return boost::math::gamma_q(p.sojourn[i].shape, p.sojourn[i].rate * s);
}

double sojourn_quantile(const ParameterSet& p, int i, double prob) {
  if (prob <= 0.0) return 0.0;
  if (prob >= 1.0) return std::numeric_limits<double>::infinity();
  const auto& g = p.sojourn[i];
  if (prob > 0.5) return boost::math::gamma_q_inv(g.shape, 1.0 - prob) / g.rate;
  return boost::math::gamma_p_inv(g.shape, prob) / g.rate;
}

double integrated_survival(const ParameterSet& p, int i, double x) {
  if (x <= 0.0) return 0.0;
  const auto& g = p.sojourn[i];
  const double mean = g.shape / g.rate;
  if (!std::isfinite(x)) return mean;
  // int_0^x (1 - V(s)) ds = x (1 - V_k(x)) + (k / r) V_{k+1}(x)
  return x * boost::math::gamma_q(g.shape, g.rate * x) + mean * boost::math::gamma_p(g.shape + 1.0, g.rate * x);
}

double max_sojourn_quantile(const ParameterSet& p, double prob, bool transient_only) {
  double out = 0.0;
  for (int i = 0; i < p.n_states; ++i) {
    if (transient_only && p.is_absorbing(i)) continue;
    out = std::max(out, sojourn_quantile(p, i, prob));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transition function

double log_transition_fn(const ParameterSet& p, int i, int j, double s) {
  check_domain(p, i, s);
  if (j < 0 || j >= p.n_states) bad("state index " + std::to_string(j) + " out of range");
  const double ninf = -std::numeric_limits<double>::infinity();
  if (p.is_absorbing(i)) return i == j ? 0.0 : ninf;
  if (i == j) return ninf;
  double mx = ninf;
  for (int k = 0; k < p.n_states; ++k) {
    if (k == i) continue;
    mx = std::max(mx, p.eta(i, k) + p.beta(i, k) * s);
  }
  double z = 0.0;
  for (int k = 0; k < p.n_states; ++k) {
    if (k == i) continue;
    z += std::exp(p.eta(i, k) + p.beta(i, k) * s - mx);
  }
  return p.eta(i, j) + p.beta(i, j) * s - mx - std::log(z);
}

double transition_fn(const ParameterSet& p, int i, int j, double s) {
  return std::exp(log_transition_fn(p, i, j, s));
}

bool has_duration_dependence(const ParameterSet& p, int i) {
  if (p.is_absorbing(i)) return false;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int j = 0; j < p.n_states; ++j) {
    if (j == i) continue;
    lo = std::min(lo, p.beta(i, j));
    hi = std::max(hi, p.beta(i, j));
  }
  return hi > lo;
}

// ---------------------------------------------------------------------------
// Kernel

namespace {

// Cubic Hermite interpolation on [0, h] with values f0, f1 and slopes d0, d1.
double hermite(double f0, double f1, double d0, double d1, double h, double t) {
  const double u = t / h;
  const double u2 = u * u, u3 = u2 * u;
  return (2 * u3 - 3 * u2 + 1) * f0 + (u3 - 2 * u2 + u) * h * d0 + (-2 * u3 + 3 * u2) * f1 + (u3 - u2) * h * d1;
}

}  // namespace

Kernel::Kernel(const ParameterSet& p, double horizon, double step) : p_(p), step_(step) {
  const int n = p.n_states;
  double reach = horizon;
  for (int i = 1; i + 1 < n; ++i) reach = std::max(reach, sojourn_quantile(p, i, 1.0 - 1e-12));
  points_ = static_cast<int>(std::ceil(reach / step_)) + 2;
  if (points_ > 400000) {
    step_ = reach / 400000.0;
    points_ = 400002;
  }
  rows_.resize(n);
  for (int i = 1; i + 1 < n; ++i) {
    Row& r = rows_[i];
    r.cdf.resize(points_);
    r.pdf.resize(points_);
    r.isurv.resize(points_);
    r.k.assign(n, std::vector<double>(points_, 0.0));
    r.dk.assign(n, std::vector<double>(points_, 0.0));
    r.ck.assign(n, std::vector<double>(points_, 0.0));
    for (int k = 0; k < points_; ++k) {
      const double x = k * step_;
      r.cdf[k] = sojourn_cdf(p, i, x);
      r.pdf[k] = k == 0 ? 0.0 : sojourn_pdf(p, i, x);
      r.isurv[k] = hasmm::integrated_survival(p, i, x);
    }
    const bool dependent = has_duration_dependence(p, i);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& kk = r.k[j];
      auto& dk = r.dk[j];
      auto& ck = r.ck[j];
      const double g0 = transition_fn(p, i, j, 0.0);
      for (int k = 0; k < points_; ++k) dk[k] = r.pdf[k] * (dependent ? transition_fn(p, i, j, k * step_) : g0);
      if (!dependent) {
        for (int k = 0; k < points_; ++k) {
          kk[k] = g0 * r.cdf[k];
          ck[k] = g0 * (k * step_ - r.isurv[k]);
        }
        continue;
      }
      constexpr int kSub = 4;
      for (int k = 1; k < points_; ++k) {
        double acc = 0.0;
        double prev = r.cdf[k - 1];
        for (int sub = 0; sub < kSub; ++sub) {
          const double a = (k - 1 + static_cast<double>(sub) / kSub) * step_;
          const double b = (k - 1 + static_cast<double>(sub + 1) / kSub) * step_;
          const double cb = sub + 1 == kSub ? r.cdf[k] : sojourn_cdf(p, i, b);
          acc += (cb - prev) * transition_fn(p, i, j, 0.5 * (a + b));
          prev = cb;
        }
        kk[k] = kk[k - 1] + acc;
        // Trapezoid with end corrections; plain trapezoid next to the origin where the density may blow up.
        double cell = 0.5 * step_ * (kk[k - 1] + kk[k]);
        if (k > 1) cell += step_ * step_ / 12.0 * (dk[k - 1] - dk[k]);
        ck[k] = ck[k - 1] + cell;
      }
    }
  }
}

double Kernel::cdf(int i, double x) const {
  if (x <= 0.0) return 0.0;
  if (p_.is_absorbing(i)) return sojourn_cdf(p_, i, x);
  const double pos = x / step_;
  if (pos >= points_ - 1) return sojourn_cdf(p_, i, x);
  const int k = static_cast<int>(pos);
  const auto& c = rows_[i].cdf;
  return c[k] + (pos - k) * (c[k + 1] - c[k]);
}

double Kernel::integrated_survival(int i, double x) const {
  if (x <= 0.0) return 0.0;
  if (p_.is_absorbing(i)) return hasmm::integrated_survival(p_, i, x);
  const double pos = x / step_;
  if (pos >= points_ - 1) return hasmm::integrated_survival(p_, i, x);
  const int k = static_cast<int>(pos);
  const Row& r = rows_[i];
  return hermite(r.isurv[k], r.isurv[k + 1], 1.0 - r.cdf[k], 1.0 - r.cdf[k + 1], step_, x - k * step_);
}

double Kernel::kernel(int i, int j, double x) const {
  if (p_.is_absorbing(i) || i == j || x <= 0.0) return 0.0;
  const auto& kk = rows_[i].k[j];
  const double pos = x / step_;
  const int last = points_ - 1;
  if (pos >= last) {
    const double xl = last * step_;
    return kk[last] + transition_fn(p_, i, j, xl) * (sojourn_cdf(p_, i, x) - rows_[i].cdf[last]);
  }
  const int k = static_cast<int>(pos);
  return kk[k] + (pos - k) * (kk[k + 1] - kk[k]);
}

double Kernel::cumulative(int i, int j, double x) const {
  if (p_.is_absorbing(i) || i == j || x <= 0.0) return 0.0;
  const Row& r = rows_[i];
  const auto& kk = r.k[j];
  const auto& ck = r.ck[j];
  const double pos = x / step_;
  const int last = points_ - 1;
  if (pos >= last) {
    const double xl = last * step_;
    const double g = transition_fn(p_, i, j, xl);
    const double tail = (x - hasmm::integrated_survival(p_, i, x)) - (xl - r.isurv[last]) - (x - xl) * r.cdf[last];
    return ck[last] + (x - xl) * kk[last] + g * tail;
  }
  const int k = static_cast<int>(pos);
  return hermite(ck[k], ck[k + 1], kk[k], kk[k + 1], step_, x - k * step_);
}

double Kernel::mean_transition(int i, int j, double s) const {
  if (p_.is_absorbing(i)) return i == j ? 1.0 : 0.0;
  if (s <= step_) {
    // Below one grid step: g evaluated at the mean of the sojourn law truncated to [0, s],
    // which is close to s k / (k + 1) for small s.
    const double k = p_.sojourn[i].shape;
    return transition_fn(p_, i, j, s * k / (k + 1.0));
  }
  const double v = sojourn_cdf(p_, i, s);
  if (v < 1e-300) return transition_fn(p_, i, j, s);
  return kernel(i, j, s) / v;
}

double Kernel::truncated(int i, int j, double tau, double lo, double hi) const {
  if (hi < lo || lo < 0.0) bad("elapsed-time bounds must satisfy 0 <= lo <= hi");
  if (p_.is_absorbing(i) || i == j || tau <= 0.0) return 0.0;
  double out;
  if (hi - lo <= 1e-12 * std::max(1.0, hi)) {
    const double sf = 1.0 - cdf(i, lo);
    if (sf < 1e-12) return 0.0;
    out = (kernel(i, j, tau + lo) - kernel(i, j, lo)) / sf;
  } else {
    const double den = integrated_survival(i, hi) - integrated_survival(i, lo);
    if (den < 1e-12 * (hi - lo)) return 0.0;
    const double num = (cumulative(i, j, tau + hi) - cumulative(i, j, tau + lo)) -
                       (cumulative(i, j, hi) - cumulative(i, j, lo));
    out = num / den;
  }
  return std::clamp(out, 0.0, 1.0);
}

double Kernel::stay(int i, double tau, double lo, double hi) const {
  if (p_.is_absorbing(i) || tau <= 0.0) return 1.0;
  if (hi < lo) std::swap(lo, hi);
  double out;
  if (hi - lo <= 1e-12 * std::max(1.0, hi)) {
    const double sf = 1.0 - cdf(i, lo);
    if (sf < 1e-12) return 1.0;
    out = (1.0 - cdf(i, lo + tau)) / sf;
  } else {
    const double den = integrated_survival(i, hi) - integrated_survival(i, lo);
    if (den < 1e-12 * (hi - lo)) return 1.0;
    out = (integrated_survival(i, tau + hi) - integrated_survival(i, tau + lo)) / den;
  }
  return std::clamp(out, 0.0, 1.0);
}

Eigen::MatrixXd Kernel::jump_matrix() const {
  const int n = p_.n_states;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    if (p_.is_absorbing(i)) {
      m(i, i) = 1.0;
      continue;
    }
    for (int j = 0; j < n; ++j) m(i, j) = kernel(i, j, std::numeric_limits<double>::infinity());
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

double mean_transition_fn(const ParameterSet& p, int i, int j, double s, double step) {
  return Kernel(p, s, step).mean_transition(i, j, s);
}

double semi_markov_kernel(const ParameterSet& p, int i, int j, double s, double step) {
  return Kernel(p, s, step).kernel(i, j, s);
}

double truncated_kernel(const ParameterSet& p, int i, int j, double tau, double lo, double hi, double step) {
  return Kernel(p, tau + std::max(lo, hi), step).truncated(i, j, tau, lo, hi);
}

Eigen::VectorXd absorption_probabilities(const ParameterSet& p) {
  const int n = p.n_states;
  const Eigen::MatrixXd jump = Kernel(p, 0.0, 0.01).jump_matrix();
  const int t = n - 2;
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(t, t) - jump.block(1, 1, t, t);
  Eigen::VectorXd b = jump.block(1, n - 1, t, 1);
  Eigen::VectorXd x = a.fullPivLu().solve(b);
  Eigen::VectorXd out(n);
  out[0] = 0.0;
  out[n - 1] = 1.0;
  out.segment(1, t) = x.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

}  // namespace hasmm
