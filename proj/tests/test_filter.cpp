#include <chrono>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "hasmm/error.hpp"
#include "hasmm/eval.hpp"
#include "hasmm/filter.hpp"
#include "hasmm/generate.hpp"
#include "hasmm/reference.hpp"
#include "hasmm/volterra.hpp"

using namespace hasmm;

namespace {

struct Fixture {
  ParameterSet p;
  TransitionTable table;
};

const Fixture& reference() {
  static const Fixture f = [] {
    ParameterSet p = reference_params();
    return Fixture{p, build_table(p, default_grid(p, 1.0))};
  }();
  return f;
}

const Fixture& toy() {
  static const Fixture f = [] {
    ParameterSet p = toy_params();
    return Fixture{p, build_table(p, default_grid(p, 1.0))};
  }();
  return f;
}

Episode prefix(Episode e, int m) {
  if (e.size() > m) {
    e.times.resize(m);
    e.values.conservativeResize(m, Eigen::NoChange);
  }
  return e;
}

double tv(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

Episode manual(const std::vector<double>& times, const std::vector<double>& values) {
  Episode e;
  e.id = "manual";
  e.times = times;
  // Column-major: all of stream 1, then all of stream 2.
  const Eigen::Index n = static_cast<Eigen::Index>(times.size());
  e.values = Eigen::Map<const Eigen::MatrixXd>(values.data(), n, static_cast<Eigen::Index>(values.size()) / n);
  e.censor_time = times.empty() ? 1.0 : times.back() + 1.0;
  e.label = 2;
  return e;
}

}  // namespace

TEST_CASE("snapshots are normalized and consistent") {
  const Fixture& f = reference();
  for (const Episode& e : generate(f.p, 30, 8, {})) {
    for (const auto& s : run_filter(f.p, f.table, e)) {
      CHECK(s.id == e.id);
      CHECK(std::abs(s.posterior.sum() - 1.0) <= 1e-8);
      CHECK(s.posterior.minCoeff() >= 0.0);
      Eigen::Index best;
      s.posterior.maxCoeff(&best);
      CHECK(s.map_state == best);
      CHECK(s.risk >= 0.0);
      CHECK(s.risk <= 1.0);
    }
  }
}

TEST_CASE("first observation matches the prior propagated through the table") {
  const Fixture& f = toy();
  const double t1 = 3.0;
  Eigen::RowVectorXd y(1);
  y << 2.2;
  FilterOptions opt;
  opt.compute_risk = false;
  ForwardFilter filter(f.p, f.table, opt);
  const PosteriorSnapshot s = filter.push(t1, y);

  Eigen::VectorXd direct(4);
  for (int j = 0; j < 4; ++j) {
    double prior = 0.0;
    for (int i = 0; i < 4; ++i) prior += f.p.initial[i] * f.table.query(i, j, t1, 0.0, 0.0);
    const Segment seg{{t1}, y};
    direct[j] = prior * std::exp(segment_log_density(f.p.emission[j], seg));
  }
  direct /= direct.sum();
  CHECK(tv(s.posterior, direct) <= 5e-3);
}

TEST_CASE("identical emissions leave the prior marginal") {
  // White-noise emissions shared by every state: a path's likelihood no longer depends on where
  // its visits begin, so it cancels.
  const Fixture& base = toy();
  ParameterSet p = base.p;
  for (auto& h : p.emission) {
    h = p.emission[1];
    h.task_cov.setZero();
    h.jitter = 1.0;
  }
  const TransitionTable table = build_table(p, base.table.grid());
  for (const Episode& e : generate(base.p, 5, 21, {})) {
    const auto snaps = run_filter(p, table, e);
    for (std::size_t m = 0; m < snaps.size(); ++m) {
      Eigen::VectorXd prior = Eigen::VectorXd::Zero(4);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) prior[j] += p.initial[i] * table.interpolate(i, j, e.times[m], 0.0, 0.0);
      CHECK(tv(snaps[m].posterior, prior / prior.sum()) <= 0.01);
    }
  }
}

TEST_CASE("a near-noiseless state dominates when the data sit on its mean") {
  ParameterSet p = reference_params();
  auto& h = p.emission[1];
  h.sigma = 1e-3;
  h.jitter = 1e-8;
  const TransitionTable table = build_table(p, default_grid(p, 1.0));
  Episode e;
  e.id = "x";
  e.times = {1.0, 2.0, 3.5};
  e.values = h.mean.transpose().replicate(3, 1);
  e.censor_time = 4.0;
  e.label = 2;
  const auto snaps = run_filter(p, table, e);
  CHECK(snaps.back().posterior[1] > 1.0 - 1e-6);
}

TEST_CASE("posterior agrees with path enumeration on the toy model") {
  const Fixture& f = toy();
  FilterOptions opt;
  opt.compute_risk = false;
  double worst = 0.0;
  int checked = 0;
  for (const Episode& full : generate(f.p, 6, 404, {})) {
    const Episode e = prefix(full, 4);
    if (e.size() == 0) continue;
    const auto snaps = run_filter(f.p, f.table, e, opt);
    const auto ref = oracle_enumerate(f.p, e, 0.05, 8);
    for (int m = 0; m < e.size(); ++m) worst = std::max(worst, tv(snaps[m].posterior, ref[m]));
    ++checked;
  }
  CHECK(checked >= 4);
  CHECK(worst <= 0.02);
}

TEST_CASE("incremental updates equal recomputation from scratch") {
  const Fixture& f = reference();
  const Episode e = generate(f.p, 3, 71, {})[2];
  const auto batch = run_filter(f.p, f.table, e);
  ForwardFilter inc(f.p, f.table);
  inc.reset(e.id);
  for (int m = 0; m < e.size(); ++m) {
    const PosteriorSnapshot s = inc.push(e.times[m], e.values.row(m));
    CHECK(s.posterior == batch[m].posterior);
    CHECK(s.risk == batch[m].risk);
    if (m % 5 == 0) {
      const auto again = run_filter(f.p, f.table, prefix(e, m + 1));
      CHECK(again.back().posterior == s.posterior);
    }
  }
  Eigen::RowVectorXd y = e.values.row(0);
  CHECK_THROWS_AS(inc.push(e.times.back() - 1.0, y), Error);
  CHECK_THROWS_AS(inc.push(std::numeric_limits<double>::quiet_NaN(), y), Error);
}

TEST_CASE("a common factor in every state's emission density cancels") {
  // An extra white-noise stream with the same law under every state multiplies every path's
  // likelihood by the same constant.
  const Fixture& f = toy();
  ParameterSet q = f.p;
  for (auto& h : q.emission) {
    h.mean.conservativeResize(2);
    h.mean[1] = 10.0;
    Eigen::MatrixXd tc = Eigen::MatrixXd::Zero(2, 2);
    tc(0, 0) = h.task_cov(0, 0);
    h.task_cov = tc;
  }
  const TransitionTable table = build_table(q, f.table.grid());
  for (const Episode& e : generate(f.p, 4, 5, {})) {
    Episode w = e;
    w.values.conservativeResize(Eigen::NoChange, 2);
    for (int m = 0; m < w.size(); ++m) w.values(m, 1) = 10.0 + std::sin(1.3 * m) * 3.0;
    const auto a = run_filter(f.p, f.table, e);
    const auto b = run_filter(q, table, w);
    for (int m = 0; m < e.size(); ++m) CHECK(tv(a[m].posterior, b[m].posterior) <= 1e-9);
  }
}

TEST_CASE("a day-long silence is bridged without special casing") {
  const Fixture& f = reference();
  const Episode e = manual({0.5, 1.0, 1.5, 25.5, 26.0}, {4.6, 4.4, 4.5, 6.8, 7.1, 2.4, 2.6, 2.5, -2.4, -2.6});
  const auto snaps = run_filter(f.p, f.table, e);
  REQUIRE(snaps.size() == 5);
  for (const auto& s : snaps) {
    CHECK(s.posterior.allFinite());
    CHECK(std::abs(s.posterior.sum() - 1.0) <= 1e-8);
  }
  CHECK(snaps[2].map_state == 1);
  CHECK(snaps[4].map_state == 2);
}

TEST_CASE("risk score") {
  const Fixture& f = reference();
  const Eigen::VectorXd absorb = absorption_row(f.table);
  CHECK(risk_score(Eigen::Vector3d(0, 0, 1), absorb) == 1.0);
  CHECK(risk_score(Eigen::Vector3d(1, 0, 0), absorb) == 0.0);
  // Absorption ordering holds here, so moving mass from state 1 toward N raises the risk.
  REQUIRE(absorb[0] <= absorb[1]);
  REQUIRE(absorb[1] <= absorb[2]);
  double prev = -1.0;
  for (double x = 0.0; x <= 1.0; x += 0.1) {
    const double r = risk_score(Eigen::Vector3d(1.0 - x, 0.0, x), absorb);
    CHECK(r >= prev);
    prev = r;
  }

  // Forward simulation from a posterior as the initial law.
  const Eigen::Vector3d post(0.3, 0.5, 0.2);
  ParameterSet p = f.p;
  p.initial = post;
  Rng rng(8);
  int hits = 0;
  const int runs = 100000;
  for (int d = 0; d < runs; ++d) hits += sample_trajectory(p, rng).states.back() == 2;
  CHECK(std::abs(risk_score(post, absorb) - static_cast<double>(hits) / runs) <= 0.01);
}

TEST_CASE("snapshot JSON round-trip") {
  PosteriorSnapshot s;
  s.id = "ep";
  s.t = 3.25;
  s.posterior = Eigen::Vector3d(0.2, 0.5, 0.3);
  s.map_state = 1;
  s.risk = 0.41;
  const json j = snapshot_to_json(s);
  CHECK(j["map_state"] == 2);
  const PosteriorSnapshot back = snapshot_from_json(j);
  CHECK(back.id == s.id);
  CHECK(back.t == s.t);
  CHECK(back.posterior == s.posterior);
  CHECK(back.map_state == s.map_state);
  CHECK(back.risk == s.risk);
  CHECK_THROWS_AS(snapshot_from_json(json{{"id", "x"}}), Error);
}

TEST_CASE("mismatched table is rejected") {
  const Fixture& f = reference();
  ParameterSet other = f.p;
  other.sojourn[1].shape = 2.5;
  CHECK_THROWS_AS(ForwardFilter(other, f.table), Error);
  CHECK_THROWS_AS(ForwardFilter(toy_params(), f.table), Error);
}

TEST_CASE("cost grows at most quadratically in the episode length") {
  const Fixture& f = toy();
  const FilterOptions opt;
  Rng rng(6);
  std::vector<double> times;
  double t = 0.0;
  for (int k = 0; k < 100; ++k) times.push_back(t += 0.05 + 0.1 * rng.uniform());
  Eigen::MatrixXd values(100, 1);
  for (int k = 0; k < 100; ++k) values(k, 0) = 1.5 + rng.normal();
  auto seconds = [&](int m) {
    double best = 1e9;
    for (int rep = 0; rep < 3; ++rep) {
      ForwardFilter filter(f.p, f.table, opt);
      const auto start = std::chrono::steady_clock::now();
      for (int k = 0; k < m; ++k) filter.push(times[k], values.row(k));
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    return best;
  };
  const double t25 = seconds(25), t100 = seconds(100);
  const double exponent = std::log(t100 / t25) / std::log(4.0);
  MESSAGE("filter cost exponent " << exponent);
  CHECK(exponent <= 2.3);
}
