#include "hasmm/volterra.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "hasmm/error.hpp"
#include "hasmm/fft.hpp"
#include "hasmm/parallel.hpp"

namespace hasmm {

namespace {

// Product-trapezoid weights of one conditioned slice. For a transient origin i and successor k,
// the convolution  int_0^tau dQ_ik(u) P_kj(tau - u)  with P linear inside each tau cell becomes
//   sum_m  w1[m] * P_kj((a-m+1) d) + w2[m] * P_kj((a-m) d).
struct SliceWeights {
  std::vector<std::vector<double>> w1, w2;  // [i*N + k][m], m = 0..A (entry 0 is zero)
  std::vector<std::vector<double>> qbar;    // [i*N + k][a]
  std::vector<std::vector<double>> leave;   // [i][a] = sum_k qbar
};

SliceWeights slice_weights(const Kernel& kern, double d_tau, int A, double lo, double hi) {
  const ParameterSet& p = kern.params();
  const int n = p.n_states;
  SliceWeights w;
  w.w1.assign(n * n, {});
  w.w2.assign(n * n, {});
  w.qbar.assign(n * n, {});
  w.leave.assign(n, std::vector<double>(A + 1, 0.0));
  for (int i = 1; i + 1 < n; ++i) {
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      std::vector<double> q(A + 1), w1(A + 1, 0.0), w2(A + 1, 0.0);
      for (int a = 0; a <= A; ++a) q[a] = kern.truncated(i, k, a * d_tau, lo, hi);
      for (int a = 1; a <= A; ++a) {
        const double half = kern.truncated(i, k, (a - 0.5) * d_tau, lo, hi);
        const double dq = std::max(0.0, q[a] - q[a - 1]);
        // int_cell theta dQ = Q(right) - mean of Q over the cell (Simpson).
        const double mean = (q[a - 1] + 4.0 * half + q[a]) / 6.0;
        const double dm = std::clamp(q[a] - mean, 0.0, dq);
        w1[a] = dq - dm;
        w2[a] = dm;
      }
      for (int a = 0; a <= A; ++a) w.leave[i][a] += q[a];
      w.qbar[i * n + k] = std::move(q);
      w.w1[i * n + k] = std::move(w1);
      w.w2[i * n + k] = std::move(w2);
    }
  }
  return w;
}

// Spectra of P_kj(.) and of P_kj shifted one step left, for every (k, j).
struct SliceSpectra {
  std::vector<Convolver::Spectrum> plain, shifted;
};

SliceSpectra spectra_of(const Convolver& conv, const std::vector<std::vector<double>>& slice, int n, int A) {
  SliceSpectra s;
  s.plain.resize(n * n);
  s.shifted.resize(n * n);
  std::vector<double> buf(A + 1);
  for (int kj = 0; kj < n * n; ++kj) {
    s.plain[kj] = conv.transform(slice[kj].data());
    for (int a = 0; a < A; ++a) buf[a] = slice[kj][a + 1];
    buf[A] = 0.0;
    s.shifted[kj] = conv.transform(buf.data());
  }
  return s;
}

// One application of the discretized equation: out[i*N+j][a].
std::vector<std::vector<double>> apply_operator(const Convolver& conv, const SliceWeights& w,
                                                const SliceSpectra& base, int n, int A) {
  std::vector<std::vector<double>> out(n * n, std::vector<double>(A + 1, 0.0));
  for (int i = 0; i < n; ++i) {
    if (i == 0 || i == n - 1) {
      for (int a = 0; a <= A; ++a) out[i * n + i][a] = 1.0;
      continue;
    }
    std::vector<Convolver::Spectrum> s1(n), s2(n);
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      s1[k] = conv.transform(w.w1[i * n + k].data());
      s2[k] = conv.transform(w.w2[i * n + k].data());
    }
    const std::size_t bins = base.plain[0].size();
    for (int j = 0; j < n; ++j) {
      Convolver::Spectrum acc(bins, {0.0, 0.0});
      for (int k = 0; k < n; ++k) {
        if (k == i) continue;
        const auto& ps = base.shifted[k * n + j];
        const auto& pp = base.plain[k * n + j];
        for (std::size_t f = 0; f < bins; ++f) acc[f] += s1[k][f] * ps[f] + s2[k][f] * pp[f];
      }
      auto& row = out[i * n + j];
      conv.inverse(acc, row.data());
      if (i == j)
        for (int a = 0; a <= A; ++a) row[a] += 1.0 - w.leave[i][a];
    }
  }
  return out;
}

void project_rows(std::vector<std::vector<double>>& slice, int n, int A) {
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a <= A; ++a) {
      double total = 0.0;
      for (int j = 0; j < n; ++j) {
        double& v = slice[i * n + j][a];
        v = std::clamp(v, 0.0, 1.0);
        total += v;
      }
      if (total > 0.0)
        for (int j = 0; j < n; ++j) slice[i * n + j][a] /= total;
    }
  }
}

double kernel_step(const TableGrid& g, const VolterraOptions& opt) {
  if (opt.kernel_step > 0.0) return opt.kernel_step;
  return std::min({g.d_tau, g.d_lo, g.d_hi}) / 8.0;
}

struct Unconditioned {
  std::vector<std::vector<double>> slice;
  int iterations = 0;
  std::vector<double> trace;
};

Unconditioned solve_base(const Kernel& kern, const Convolver& conv, double d_tau, int A, const VolterraOptions& opt) {
  const int n = kern.n_states();
  const SliceWeights w = slice_weights(kern, d_tau, A, 0.0, 0.0);
  Unconditioned u;
  // Start from the kernel itself; absorbing rows are the identity throughout.
  u.slice.assign(n * n, std::vector<double>(A + 1, 0.0));
  for (int i = 0; i < n; ++i) {
    if (i == 0 || i == n - 1) {
      for (int a = 0; a <= A; ++a) u.slice[i * n + i][a] = 1.0;
      continue;
    }
    for (int k = 0; k < n; ++k)
      if (k != i) u.slice[i * n + k] = w.qbar[i * n + k];
  }
  for (int it = 1; it <= opt.max_iter; ++it) {
    const SliceSpectra spec = spectra_of(conv, u.slice, n, A);
    auto next = apply_operator(conv, w, spec, n, A);
    project_rows(next, n, A);
    double change = 0.0;
    for (int kj = 0; kj < n * n; ++kj)
      for (int a = 0; a <= A; ++a) change = std::max(change, std::abs(next[kj][a] - u.slice[kj][a]));
    u.slice = std::move(next);
    u.trace.push_back(change);
    u.iterations = it;
    if (change <= opt.epsilon) return u;
  }
  std::ostringstream msg;
  msg << "successive approximation did not reach epsilon=" << opt.epsilon << " in " << opt.max_iter
      << " iterations; residual trace:";
  for (double r : u.trace) msg << ' ' << r;
  throw Error(ErrorKind::Convergence, msg.str());
}

void validate_grid(const TableGrid& g) {
  require(g.d_tau > 0.0 && g.d_lo > 0.0 && g.d_hi > 0.0, ErrorKind::InvalidParameters, "grid steps must be positive");
  require(g.A >= 1 && g.B >= 0 && g.C >= 0, ErrorKind::InvalidParameters, "grid sizes must be non-negative, A >= 1");
}

}  // namespace

TransitionTable::TransitionTable(int n_states, const TableGrid& grid) : n_(n_states), grid_(grid) {
  const std::size_t slice = static_cast<std::size_t>(grid.A + 1) * (grid.B + 1) * (grid.C + 1);
  data_.assign(slice * n_states * n_states, 0.0);
  stay_.assign(slice * n_states, 1.0);
}

GridIndex TransitionTable::locate(double tau, double lo, double hi) const {
  GridIndex g;
  auto nearest = [&](double x, double step, int top) {
    double pos = std::ceil(x / step - 0.5);
    if (!(pos >= 0.0)) {
      g.saturated = true;
      return 0;
    }
    if (pos > top) {
      g.saturated = true;
      return top;
    }
    return static_cast<int>(pos);
  };
  g.a = nearest(tau, grid_.d_tau, grid_.A);
  g.b = nearest(lo, grid_.d_lo, grid_.B);
  g.c = nearest(hi, grid_.d_hi, grid_.C);
  return g;
}

double TransitionTable::query(int i, int j, double tau, double lo, double hi, bool* saturated) const {
  const GridIndex g = locate(tau, lo, hi);
  if (saturated) *saturated = g.saturated;
  return at(i, j, g.a, g.b, g.c);
}

namespace {

struct Axis {
  int lo;
  double frac;
  bool clipped;
};

Axis axis(double x, double step, int top) {
  const double pos = x / step;
  if (!(pos > 0.0)) return {0, 0.0, pos < 0.0};
  if (pos >= top) return {std::max(top - 1, 0), top > 0 ? 1.0 : 0.0, pos > top};
  const int k = static_cast<int>(std::floor(pos));
  return {k, pos - k, false};
}

template <typename F>
double trilinear(const TableGrid& g, double tau, double lo, double hi, F&& value, bool* saturated) {
  const Axis a = axis(tau, g.d_tau, g.A), b = axis(lo, g.d_lo, g.B), c = axis(hi, g.d_hi, g.C);
  if (saturated) *saturated = a.clipped || b.clipped;
  double out = 0.0;
  for (int da = 0; da < 2; ++da) {
    const double wa = da ? a.frac : 1.0 - a.frac;
    if (wa == 0.0) continue;
    for (int db = 0; db < 2; ++db) {
      const double wb = db ? b.frac : 1.0 - b.frac;
      if (wb == 0.0) continue;
      for (int dc = 0; dc < 2; ++dc) {
        const double wc = dc ? c.frac : 1.0 - c.frac;
        if (wc == 0.0) continue;
        out += wa * wb * wc * value(a.lo + da, b.lo + db, c.lo + dc);
      }
    }
  }
  return out;
}

}  // namespace

double TransitionTable::interpolate(int i, int j, double tau, double lo, double hi, bool* saturated) const {
  return trilinear(grid_, tau, lo, hi, [&](int a, int b, int c) { return at(i, j, a, b, c); }, saturated);
}

double TransitionTable::interpolate_stay(int i, double tau, double lo, double hi) const {
  return trilinear(grid_, tau, lo, hi, [&](int a, int b, int c) { return stay(i, a, b, c); }, nullptr);
}

Eigen::MatrixXd TransitionTable::matrix(int a, int b, int c) const {
  Eigen::MatrixXd m(n_, n_);
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) m(i, j) = at(i, j, a, b, c);
  return m;
}

std::uint64_t table_fingerprint(const ParameterSet& p, const TableGrid& g) {
  std::ostringstream s;
  s.precision(17);
  s << to_json(p).dump() << '|' << g.d_tau << '|' << g.d_lo << '|' << g.d_hi << '|' << g.A << '|' << g.B << '|'
    << g.C;
  return fnv1a(s.str());
}

std::vector<std::vector<double>> solve_unconditioned(const ParameterSet& p, double d_tau, int A,
                                                     const VolterraOptions& opt) {
  validate(p);
  TableGrid g;
  g.d_tau = g.d_lo = g.d_hi = d_tau;
  g.A = A;
  validate_grid(g);
  const Kernel kern(p, (A + 1) * d_tau, kernel_step(g, opt));
  const Convolver conv(A + 1);
  return solve_base(kern, conv, d_tau, A, opt).slice;
}

TransitionTable build_table(const ParameterSet& p, const TableGrid& grid, const VolterraOptions& opt) {
  validate(p);
  validate_grid(grid);
  const int n = p.n_states;
  const int A = grid.A;
  const double horizon = (A + 1) * grid.d_tau + std::max(grid.B * grid.d_lo, grid.C * grid.d_hi);
  const Kernel kern(p, horizon, kernel_step(grid, opt));
  const Convolver conv(A + 1);
  Unconditioned base = solve_base(kern, conv, grid.d_tau, A, opt);
  spdlog::debug("volterra: unconditioned slice converged in {} iterations", base.iterations);

  TransitionTable t(n, grid);
  t.fingerprint = table_fingerprint(p, grid);
  t.iterations = base.iterations;
  t.residual_trace = base.trace;
  const SliceSpectra spec = spectra_of(conv, base.slice, n, A);

  const int slices = (grid.B + 1) * (grid.C + 1);
  parallel_for(slices, opt.threads, [&](int bc) {
    const int b = bc / (grid.C + 1);
    const int c = bc % (grid.C + 1);
    const double lo = b * grid.d_lo, hi = c * grid.d_hi;
    const SliceWeights w = slice_weights(kern, grid.d_tau, A, std::min(lo, hi), std::max(lo, hi));
    std::vector<std::vector<double>> slice;
    if (b == 0 && c == 0) {
      slice = base.slice;
    } else {
      slice = apply_operator(conv, w, spec, n, A);
      project_rows(slice, n, A);
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        // FFT round-off leaves ~1e-17 at tau = 0; the slice is the identity by definition.
        t.at(i, j, 0, b, c) = i == j ? 1.0 : 0.0;
        for (int a = 1; a <= A; ++a) t.at(i, j, a, b, c) = slice[i * n + j][a];
      }
      if (i == 0 || i == n - 1) continue;
      for (int a = 0; a <= A; ++a) t.stay(i, a, b, c) = std::clamp(1.0 - w.leave[i][a], 0.0, 1.0);
    }
  });
  return t;
}

double fixed_point_residual(const TransitionTable& t, const ParameterSet& p, const VolterraOptions& opt) {
  const TableGrid& grid = t.grid();
  const int n = p.n_states;
  const int A = grid.A;
  const double horizon = (A + 1) * grid.d_tau + std::max(grid.B * grid.d_lo, grid.C * grid.d_hi);
  const Kernel kern(p, horizon, kernel_step(grid, opt));
  const Convolver conv(A + 1);
  std::vector<std::vector<double>> base(n * n, std::vector<double>(A + 1));
  for (int kj = 0; kj < n * n; ++kj)
    for (int a = 0; a <= A; ++a) base[kj][a] = t.at(kj / n, kj % n, a, 0, 0);
  const SliceSpectra spec = spectra_of(conv, base, n, A);
  double worst = 0.0;
  for (int b = 0; b <= grid.B; ++b) {
    for (int c = 0; c <= grid.C; ++c) {
      const double lo = b * grid.d_lo, hi = c * grid.d_hi;
      const SliceWeights w = slice_weights(kern, grid.d_tau, A, std::min(lo, hi), std::max(lo, hi));
      const auto img = apply_operator(conv, w, spec, n, A);
      for (int kj = 0; kj < n * n; ++kj)
        for (int a = 0; a <= A; ++a) worst = std::max(worst, std::abs(img[kj][a] - t.at(kj / n, kj % n, a, b, c)));
    }
  }
  return worst;
}

Eigen::VectorXd absorption_row(const TransitionTable& t, double plateau_tol) {
  const int n = t.n_states();
  const int A = t.grid().A;
  Eigen::VectorXd out(n);
  double drift = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = t.at(i, n - 1, A, 0, 0);
    drift = std::max(drift, std::abs(out[i] - t.at(i, n - 1, std::max(0, A - 10), 0, 0)));
  }
  if (A < 10 || drift > plateau_tol) {
    std::ostringstream msg;
    msg << "absorption probabilities have not plateaued at tau=" << A * t.grid().d_tau << " (drift " << drift
        << " over the last 10 grid points); enlarge the tau axis";
    throw Error(ErrorKind::Convergence, msg.str());
  }
  return out;
}

TableGrid default_grid(const ParameterSet& p, double dt, const VolterraOptions& opt) {
  validate(p);
  TableGrid g;
  g.d_tau = g.d_lo = g.d_hi = dt;
  const double t99 = max_sojourn_quantile(p, 0.99, true);
  g.B = g.C = std::max(1, static_cast<int>(std::ceil(t99 / dt)));
  int A = std::max(20, static_cast<int>(std::ceil(3.0 * t99 / dt)));
  const int n = p.n_states;
  for (int attempt = 0; attempt < 8; ++attempt, A *= 2) {
    const auto slice = solve_unconditioned(p, dt, A, opt);
    double drift = 0.0;
    for (int i = 0; i < n; ++i)
      drift = std::max(drift, std::abs(slice[i * n + n - 1][A] - slice[i * n + n - 1][A - 10]));
    if (drift <= 1e-3 * 0.5) break;
  }
  g.A = A;
  return g;
}

// ---------------------------------------------------------------------------
// Binary format: little-endian header then f64 payload.

namespace {

constexpr char kMagic[8] = {'H', 'A', 'S', 'M', 'M', 'T', 'B', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  o.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  o.write(reinterpret_cast<const char*>(b), 8);
}
void put_f64(std::ostream& o, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(o, v);
}

struct Reader {
  std::istream& in;
  std::string path;
  void bytes(unsigned char* b, int n) {
    in.read(reinterpret_cast<char*>(b), n);
    if (in.gcount() != n) throw Error(ErrorKind::MalformedInput, "table file " + path + " is truncated");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    return v;
  }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
};

}  // namespace

void TransitionTable::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write table " + path);
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(n_));
  put_u32(out, static_cast<std::uint32_t>(grid_.A));
  put_u32(out, static_cast<std::uint32_t>(grid_.B));
  put_u32(out, static_cast<std::uint32_t>(grid_.C));
  put_f64(out, grid_.d_tau);
  put_f64(out, grid_.d_lo);
  put_f64(out, grid_.d_hi);
  put_u64(out, fingerprint);
  put_u32(out, static_cast<std::uint32_t>(iterations));
  for (double v : data_) put_f64(out, v);
  for (double v : stay_) put_f64(out, v);
  if (!out) throw Error(ErrorKind::Io, "failed writing table " + path);
}

TransitionTable TransitionTable::load(const std::string& path, const ParameterSet* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open table " + path);
  Reader r{in, path};
  unsigned char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw Error(ErrorKind::MalformedInput, path + " is not a table file");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw Error(ErrorKind::MalformedInput, path + ": unsupported table version " + std::to_string(version));
  const int n = static_cast<int>(r.u32());
  TableGrid g;
  g.A = static_cast<int>(r.u32());
  g.B = static_cast<int>(r.u32());
  g.C = static_cast<int>(r.u32());
  g.d_tau = r.f64();
  g.d_lo = r.f64();
  g.d_hi = r.f64();
  if (n < 3 || n > 64 || g.A < 1 || g.A > 10000000 || g.B < 0 || g.C < 0 || g.B > 100000 || g.C > 100000)
    throw Error(ErrorKind::MalformedInput, path + ": implausible table header");
  TransitionTable t(n, g);
  t.fingerprint = r.u64();
  t.iterations = static_cast<int>(r.u32());
  for (double& v : t.data_) v = r.f64();
  for (double& v : t.stay_) v = r.f64();
  if (expected) {
    const std::uint64_t want = table_fingerprint(*expected, g);
    if (want != t.fingerprint || expected->n_states != n)
      throw Error(ErrorKind::FingerprintMismatch, path + " was built for different parameters");
  }
  return t;
}

}  // namespace hasmm
