#include "hasmm/emission.hpp"

#include <cmath>
#include <numbers>

#include "hasmm/error.hpp"

namespace hasmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double rbf(const GpHyper& h, double a, double b) {
  const double d = (a - b) / h.length_scale;
  return h.sigma * h.sigma * std::exp(-0.5 * d * d);
}

struct Entry {
  int obs;
  int stream;
};

}  // namespace

Eigen::MatrixXd build_covariance(const GpHyper& h, const std::vector<double>& times) {
  const int n = static_cast<int>(times.size());
  const int q = h.n_streams();
  if (n == 0) throw Error(ErrorKind::MalformedInput, "covariance needs at least one time");
  Eigen::MatrixXd k(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b <= a; ++b) k(a, b) = k(b, a) = rbf(h, times[a], times[b]);
  Eigen::MatrixXd cov(q * n, q * n);
  for (int l = 0; l < q; ++l)
    for (int v = 0; v < q; ++v) cov.block(l * n, v * n, n, n) = h.task_cov(l, v) * k;
  cov.diagonal().array() += h.jitter;
  return cov;
}

double gaussian_log_density(const Eigen::MatrixXd& cov, const Eigen::VectorXd& resid, bool* used_fallback) {
  const int d = static_cast<int>(resid.size());
  if (d == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all()) {
    const Eigen::VectorXd z = llt.matrixL().solve(resid);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    if (used_fallback) *used_fallback = false;
    return -0.5 * (d * kLog2Pi + logdet + z.squaredNorm());
  }
  // Pseudo-inverse on the numerically non-singular subspace.
  if (used_fallback) *used_fallback = true;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd& lam = es.eigenvalues();
  const double cut = 1e-10 * std::max(lam.maxCoeff(), 0.0);
  const Eigen::VectorXd proj = es.eigenvectors().transpose() * resid;
  double out = 0.0;
  for (int k = 0; k < d; ++k) {
    if (lam[k] <= cut) continue;
    out += -0.5 * (kLog2Pi + std::log(lam[k]) + proj[k] * proj[k] / lam[k]);
  }
  return out;
}

double segment_log_density(const GpHyper& h, const Segment& seg, bool* used_fallback) {
  const int n = static_cast<int>(seg.times.size());
  const int q = h.n_streams();
  if (seg.values.rows() != n || (n > 0 && seg.values.cols() != q))
    throw Error(ErrorKind::MalformedInput, "segment values must be n x Q");
  std::vector<Entry> entries;
  for (int a = 0; a < n; ++a)
    for (int l = 0; l < q; ++l)
      if (!std::isnan(seg.values(a, l))) entries.push_back({a, l});
  const int d = static_cast<int>(entries.size());
  if (used_fallback) *used_fallback = false;
  if (d == 0) return 0.0;
  Eigen::MatrixXd cov(d, d);
  Eigen::VectorXd r(d);
  for (int x = 0; x < d; ++x) {
    r[x] = seg.values(entries[x].obs, entries[x].stream) - h.mean[entries[x].stream];
    for (int y = 0; y <= x; ++y) {
      double c = h.task_cov(entries[x].stream, entries[y].stream) *
                 rbf(h, seg.times[entries[x].obs], seg.times[entries[y].obs]);
      if (x == y) c += h.jitter;
      cov(x, y) = cov(y, x) = c;
    }
  }
  return gaussian_log_density(cov, r, used_fallback);
}

SegmentSample sample_segment(const GpHyper& h, const std::vector<double>& times, Rng& rng) {
  const int n = static_cast<int>(times.size());
  const int q = h.n_streams();
  SegmentSample out;
  out.values.resize(n, q);
  if (n == 0) return out;
  const Eigen::MatrixXd cov = build_covariance(h, times);
  Eigen::VectorXd z(q * n);
  for (int k = 0; k < q * n; ++k) z[k] = rng.normal();
  Eigen::VectorXd x;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) {
    x = llt.matrixL() * z;
  } else {
    out.used_fallback = true;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    x = es.eigenvectors() * root.cwiseProduct(z);
  }
  for (int l = 0; l < q; ++l)
    for (int a = 0; a < n; ++a) out.values(a, l) = h.mean[l] + x[l * n + a];
  return out;
}

SegmentDensityCache::SegmentDensityCache(const GpHyper& h, int window)
    : h_(h), window_(std::max(window, 0)), prefix_(1, 0.0) {}

SegmentDensityCache::SegmentDensityCache(const GpHyper& h, const std::vector<double>& times,
                                         const Eigen::MatrixXd& values, int window)
    : SegmentDensityCache(h, window) {
  const int n = static_cast<int>(times.size());
  if (values.rows() != n || (n > 0 && values.cols() != h.n_streams()))
    throw Error(ErrorKind::MalformedInput, "episode values must be n x Q");
  for (int k = 0; k < n; ++k) push(times[k], values.row(k));
}

void SegmentDensityCache::push(double t, const Eigen::RowVectorXd& y) {
  const int q = h_.n_streams();
  if (y.size() != q) throw Error(ErrorKind::MalformedInput, "observation must have Q entries");
  times_.push_back(t);
  values_.push_back(y);
  const int k = size() - 1;
  const int depth = std::min(k, window_);
  // Entries ordered newest observation first, so prefixes are runs ending at k.
  std::vector<Entry> entries;
  std::vector<int> boundary(depth + 1, 0);
  for (int r = 0; r <= depth; ++r) {
    const int a = k - r;
    for (int l = 0; l < q; ++l)
      if (!std::isnan(values_[a][l])) entries.push_back({a, l});
    boundary[r] = static_cast<int>(entries.size());
  }
  const int d = static_cast<int>(entries.size());
  Eigen::MatrixXd cov(d, d);
  Eigen::VectorXd res(d);
  for (int x = 0; x < d; ++x) {
    res[x] = values_[entries[x].obs][entries[x].stream] - h_.mean[entries[x].stream];
    for (int z = 0; z <= x; ++z) {
      double c = h_.task_cov(entries[x].stream, entries[z].stream) *
                 rbf(h_, times_[entries[x].obs], times_[entries[z].obs]);
      if (x == z) c += h_.jitter;
      cov(x, z) = cov(z, x) = c;
    }
  }
  std::vector<double> cur(depth + 1, 0.0);
  if (d > 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all()) {
      const Eigen::VectorXd z = llt.matrixL().solve(res);
      double acc = 0.0;
      int e = 0;
      for (int r = 0; r <= depth; ++r) {
        for (; e < boundary[r]; ++e) acc -= 0.5 * (kLog2Pi + z[e] * z[e]) + std::log(llt.matrixLLT()(e, e));
        cur[r] = acc;
      }
    } else {
      used_fallback_ = true;
      for (int r = 0; r <= depth; ++r) {
        const int m = boundary[r];
        cur[r] = gaussian_log_density(cov.topLeftCorner(m, m), res.head(m));
      }
    }
  }
  cond_.emplace_back(depth + 1);
  for (int r = 0; r <= depth; ++r) cond_[k][r] = cur[r] - (r > 0 ? last_[r - 1] : 0.0);
  prefix_.push_back(prefix_[k] + cond_[k][depth]);
  last_ = std::move(cur);
}

double SegmentDensityCache::log_density(int a, int b) const {
  if (a < 0 || b > size() || a > b) throw Error(ErrorKind::MalformedInput, "segment range out of bounds");
  const int split = std::min(b, a + window_ + 1);
  double out = 0.0;
  for (int k = a; k < split; ++k) out += cond_[k][k - a];
  if (b > split) out += prefix_[b] - prefix_[split];
  return out;
}

}  // namespace hasmm
