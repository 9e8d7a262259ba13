#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hasmm/error.hpp"
#include "hasmm/eval.hpp"
#include "hasmm/fft.hpp"
#include "hasmm/generate.hpp"
#include "hasmm/reference.hpp"
#include "hasmm/volterra.hpp"

using namespace hasmm;

namespace {

int state_at(const Trajectory& x, double t) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.states.size(); ++k) {
    acc += x.sojourns[k];
    if (t < acc) return x.states[k];
  }
  return x.states.back();
}

// Small reference table shared across cases; built once.
const TransitionTable& reference_table() {
  static const TransitionTable t = [] {
    const ParameterSet p = reference_params();
    return build_table(p, default_grid(p, 1.0));
  }();
  return t;
}

std::filesystem::path scratch(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hasmm_test_" + name);
}

}  // namespace

TEST_CASE("FFT convolution matches direct convolution") {
  for (int len : {1, 2, 7, 64, 100}) {
    Convolver conv(len);
    CHECK(conv.padded() >= 2 * len - 1);
    std::vector<double> a(len), b(len);
    for (int k = 0; k < len; ++k) {
      a[k] = std::sin(0.3 * k) + 0.1 * k;
      b[k] = std::exp(-0.05 * k);
    }
    const auto c = conv.convolve(a, b);
    REQUIRE(static_cast<int>(c.size()) == len);
    for (int k = 0; k < len; ++k) {
      double direct = 0.0;
      for (int m = 0; m <= k; ++m) direct += a[m] * b[k - m];
      CHECK(c[k] == doctest::Approx(direct).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("table invariants hold over the whole tensor") {
  const ParameterSet p = reference_params();
  const TransitionTable& t = reference_table();
  const TableGrid& g = t.grid();
  const int n = t.n_states();
  CHECK(t.fingerprint == table_fingerprint(p, g));
  double worst_row = 0.0, worst_zero = 0.0;
  for (int i = 0; i < n; ++i)
    for (int b = 0; b <= g.B; ++b)
      for (int c = 0; c <= g.C; ++c)
        for (int a = 0; a <= g.A; ++a) {
          double row = 0.0;
          for (int j = 0; j < n; ++j) {
            const double v = t.at(i, j, a, b, c);
            CHECK_MESSAGE((v >= 0.0 && v <= 1.0), "entry out of [0,1]");
            row += v;
            if (a == 0) worst_zero = std::max(worst_zero, std::abs(v - (i == j ? 1.0 : 0.0)));
            if (p.is_absorbing(i)) CHECK(v == (i == j ? 1.0 : 0.0));
          }
          worst_row = std::max(worst_row, std::abs(row - 1.0));
        }
  CHECK(worst_row <= 1e-6);
  CHECK(worst_zero <= 1e-12);
  CHECK(t.residual_trace.back() <= 1e-6);
  CHECK(fixed_point_residual(t, p) <= 2e-6);
}

TEST_CASE("exponential sojourns reproduce the matrix exponential") {
  const ParameterSet p = ctmc_params(1);
  TableGrid g;
  g.d_tau = g.d_lo = g.d_hi = 0.25;
  g.A = 200;
  g.B = g.C = 2;
  const TransitionTable t = build_table(p, g);
  std::vector<double> taus;
  for (int a = 0; a <= g.A; a += 10) taus.push_back(a * g.d_tau);
  const auto ref = oracle_ctmc(p, taus);
  double worst = 0.0;
  for (std::size_t k = 0; k < taus.size(); ++k)
    worst = std::max(worst, (t.matrix(static_cast<int>(k) * 10, 0, 0) - ref[k]).cwiseAbs().maxCoeff());
  CHECK(worst <= 5e-3);
  // Memorylessness: conditioning on elapsed time changes nothing.
  CHECK((t.matrix(40, 2, 2) - t.matrix(40, 0, 0)).cwiseAbs().maxCoeff() <= 5e-3);
}

TEST_CASE("unconditioned slice against simulated trajectories") {
  const ParameterSet base = reference_params();
  const TransitionTable& t = reference_table();
  ParameterSet p = base;
  p.initial = Eigen::Vector3d(0.0, 1.0, 0.0);
  Rng rng(101);
  const std::vector<int> probes{2, 5, 10, 20, 40};
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(probes.size(), 3);
  const int runs = 100000;
  int absorbed = 0;
  for (int d = 0; d < runs; ++d) {
    const Trajectory x = sample_trajectory(p, rng);
    for (std::size_t k = 0; k < probes.size(); ++k) counts(k, state_at(x, probes[k] * t.grid().d_tau)) += 1;
    absorbed += x.states.back() == 2;
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < probes.size(); ++k)
    for (int j = 0; j < 3; ++j) worst = std::max(worst, std::abs(counts(k, j) / runs - t.at(1, j, probes[k], 0, 0)));
  CHECK(worst <= 0.02);

  const Eigen::VectorXd row = absorption_row(t);
  CHECK(row[0] == 0.0);
  CHECK(row[2] == 1.0);
  CHECK(std::abs(row[1] - static_cast<double>(absorbed) / runs) <= 0.01);
}

TEST_CASE("conditioned slice against simulated residual sojourns") {
  // Elapsed time pinned at s: the remaining sojourn is the gamma law conditioned on exceeding s.
  const ParameterSet p = reference_params();
  const TransitionTable& t = reference_table();
  const int b = 6;
  const double s = b * t.grid().d_lo;
  Rng rng(55);
  const int a = 5;
  const double tau = a * t.grid().d_tau;
  Eigen::Vector3d counts = Eigen::Vector3d::Zero();
  int runs = 0;
  while (runs < 100000) {
    const double first = rng.gamma(p.sojourn[1].shape, p.sojourn[1].rate);
    if (first <= s) continue;
    ++runs;
    const double left = first - s;
    if (tau < left) {
      counts[1] += 1;
      continue;
    }
    // Transition at the end of the first visit, then continue from the next state.
    std::vector<double> w{transition_fn(p, 1, 0, first), 0.0, transition_fn(p, 1, 2, first)};
    const int next = rng.categorical(w);
    counts[next] += 1;
  }
  for (int j = 0; j < 3; ++j) CHECK(std::abs(counts[j] / runs - t.at(1, j, a, b, b)) <= 0.02);
  CHECK(std::abs(counts[1] / runs - t.stay(1, a, b, b)) <= 0.02);
}

TEST_CASE("halving the grid step moves the unconditioned slice by at most 0.01") {
  const ParameterSet p = reference_params();
  const auto coarse = solve_unconditioned(p, 1.0, 60);
  const auto fine = solve_unconditioned(p, 0.5, 120);
  double worst = 0.0;
  for (std::size_t ij = 0; ij < coarse.size(); ++ij)
    for (int a = 0; a <= 60; ++a) worst = std::max(worst, std::abs(coarse[ij][a] - fine[ij][2 * a]));
  CHECK(worst <= 0.01);
}

TEST_CASE("grid lookup") {
  const TransitionTable& t = reference_table();
  const TableGrid& g = t.grid();
  for (double lo : {0.0, 3.0, 7.5})
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(t.query(i, j, 0.0, lo, lo + 2.0) == (i == j ? 1.0 : 0.0));

  GridIndex on = t.locate(4.0, 2.0, 5.0);
  CHECK(on.a == 4);
  CHECK(on.b == 2);
  CHECK(on.c == 5);
  CHECK(!on.saturated);
  GridIndex mid = t.locate(4.5, 2.5, 5.5);
  CHECK(mid.a == 4);
  CHECK(mid.b == 2);
  CHECK(mid.c == 5);
  CHECK(t.locate(4.51, 0.0, 0.0).a == 5);

  bool sat = false;
  CHECK(t.query(1, 2, (g.A + 5) * g.d_tau, 0.0, 0.0, &sat) == t.at(1, 2, g.A, 0, 0));
  CHECK(sat);
  t.query(1, 2, 3.0, 0.0, (g.C + 3) * g.d_hi, &sat);
  CHECK(sat);

  // Interpolation agrees with the tensor at grid points and stays between neighbours.
  for (int a : {0, 3, 11})
    CHECK(t.interpolate(1, 2, a * g.d_tau, 2 * g.d_lo, 4 * g.d_hi) == doctest::Approx(t.at(1, 2, a, 2, 4)));
  const double v = t.interpolate(1, 2, 3.5 * g.d_tau, 0.0, 0.0);
  CHECK(v >= std::min(t.at(1, 2, 3, 0, 0), t.at(1, 2, 4, 0, 0)));
  CHECK(v <= std::max(t.at(1, 2, 3, 0, 0), t.at(1, 2, 4, 0, 0)));
  CHECK(t.interpolate_stay(1, 5 * g.d_tau, g.d_lo, g.d_hi) == doctest::Approx(t.stay(1, 5, 1, 1)));
}

TEST_CASE("table files round-trip and reject mismatches") {
  const ParameterSet p = reference_params();
  const TransitionTable& t = reference_table();
  const auto path = scratch("table.bin");
  t.save(path.string());
  const TransitionTable back = TransitionTable::load(path.string(), &p);
  CHECK(back.fingerprint == t.fingerprint);
  CHECK(back.grid().A == t.grid().A);
  bool identical = true;
  const TableGrid& g = t.grid();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int b = 0; b <= g.B; ++b)
        for (int c = 0; c <= g.C; ++c)
          for (int a = 0; a <= g.A; ++a) identical &= back.at(i, j, a, b, c) == t.at(i, j, a, b, c);
  CHECK(identical);

  ParameterSet other = p;
  other.sojourn[1].rate = 0.3;
  try {
    TransitionTable::load(path.string(), &other);
    FAIL("mismatched fingerprint accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::FingerprintMismatch);
  }

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(TransitionTable::load(path.string()), Error);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "not a table";
  }
  CHECK_THROWS_AS(TransitionTable::load(path.string()), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(TransitionTable::load(path.string()), Error);
}

TEST_CASE("absorption row requires a plateau") {
  const ParameterSet p = reference_params();
  TableGrid g;
  g.A = 12;
  g.B = g.C = 1;
  const TransitionTable t = build_table(p, g);
  CHECK_THROWS_AS(absorption_row(t), Error);
}
