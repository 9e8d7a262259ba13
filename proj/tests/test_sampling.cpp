#include <cmath>
#include <map>

#include "doctest.h"
#include "hasmm/error.hpp"
#include "hasmm/generate.hpp"
#include "hasmm/reference.hpp"
#include "hasmm/sampling.hpp"
#include "stats.hpp"

using namespace hasmm;
using hasmm::testing::ks_critical;
using hasmm::testing::ks_statistic;

namespace {

ParameterSet gamma_state(double shape, double rate) {
  ParameterSet p = reference_params();
  p.sojourn[1] = {shape, rate};
  return p;
}

// Coarse description of a path: visited states and the first sojourn in whole hours.
std::string shape_of(const Trajectory& x) {
  std::string s;
  for (std::size_t k = 0; k < x.states.size() && k < 5; ++k) s += static_cast<char>('0' + x.states[k]);
  return s + ":" + std::to_string(static_cast<int>(x.sojourns[0]));
}

double tv(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  std::map<std::string, double> d = a;
  for (const auto& [k, v] : b) d[k] -= v;
  double out = 0.0;
  for (const auto& [k, v] : d) out += std::abs(v);
  return 0.5 * out;
}

}  // namespace

TEST_CASE("truncated rejection sampler") {
  const ParameterSet p = gamma_state(2.0, 1.0);
  Rng rng(1);
  const int n = 100000;

  std::vector<double> plain(n);
  for (auto& x : plain) x = tr_sampler(p, 1, std::numeric_limits<double>::infinity(), rng);
  CHECK(ks_statistic(plain, [&](double s) { return sojourn_cdf(p, 1, s); }) < ks_critical(n, 0.001));

  std::vector<double> cut(n);
  for (auto& x : cut) {
    x = tr_sampler(p, 1, 1.0, rng);
    REQUIRE(x < 1.0);
  }
  const double norm = sojourn_cdf(p, 1, 1.0);
  CHECK(ks_statistic(cut, [&](double s) { return sojourn_cdf(p, 1, s) / norm; }) <= 0.01);

  // Acceptance below 1%: the inverse-CDF branch.
  const double tiny = 0.1;
  REQUIRE(sojourn_cdf(p, 1, tiny) < 0.01);
  std::vector<double> small(n);
  for (auto& x : small) {
    x = tr_sampler(p, 1, tiny, rng);
    REQUIRE(x < tiny);
  }
  const double tiny_norm = sojourn_cdf(p, 1, tiny);
  CHECK(ks_statistic(small, [&](double s) { return sojourn_cdf(p, 1, s) / tiny_norm; }) < ks_critical(n, 0.001));

  CHECK_THROWS_AS(tr_sampler(p, 1, 0.0, rng), Error);
  CHECK_THROWS_AS(tr_sampler(p, 1, -2.0, rng), Error);
}

TEST_CASE("gamma truncated to an interval") {
  const ParameterSet p = gamma_state(3.0, 0.5);
  Rng rng(2);
  for (auto [lo, hi] : {std::pair{0.0, 2.0}, std::pair{4.0, 9.0}, std::pair{30.0, 1e9}}) {
    std::vector<double> xs(50000);
    for (auto& x : xs) {
      x = truncated_gamma(p, 1, lo, hi, rng);
      REQUIRE(x >= lo);
      REQUIRE(x < hi);
    }
    const double a = sojourn_cdf(p, 1, lo), b = sojourn_cdf(p, 1, hi);
    const double sa = sojourn_sf(p, 1, lo), sb = sojourn_sf(p, 1, hi);
    CHECK(ks_statistic(xs, [&](double s) { return a < 0.5 ? (sojourn_cdf(p, 1, s) - a) / (b - a)
                                                           : (sa - sojourn_sf(p, 1, s)) / (sa - sb); }) <
          ks_critical(xs.size(), 0.001));
  }
  CHECK_THROWS_AS(truncated_gamma(p, 1, 3.0, 3.0, rng), Error);
}

TEST_CASE("bivariate rejection sampler") {
  Rng rng(3);
  SUBCASE("deterministic transitions accept every proposal") {
    ParameterSet p = toy_params();
    p.eta.setConstant(-50.0);
    p.beta.setZero();
    p.eta(1, 3) = p.eta(2, 3) = 50.0;
    const Eigen::Vector4d alpha(0.0, 0.3, 0.7, 0.0);
    int twos = 0;
    std::vector<double> ws;
    for (int k = 0; k < 20000; ++k) {
      const BarDraw d = bar_sampler(alpha, p, 3, 4.0, rng);
      CHECK(d.proposals == 1);
      twos += d.state == 2;
      if (d.state == 1) ws.push_back(d.duration);
    }
    CHECK(std::abs(twos / 20000.0 - 0.7) < 4.0 * std::sqrt(0.21 / 20000.0));
    const double norm = sojourn_cdf(p, 1, 4.0);
    CHECK(ks_statistic(ws, [&](double s) { return sojourn_cdf(p, 1, s) / norm; }) < ks_critical(ws.size(), 0.001));
  }
  SUBCASE("point-mass weights pin the state") {
    const ParameterSet p = toy_params();
    const Eigen::Vector4d alpha(0.0, 0.0, 1.0, 0.0);
    for (int k = 0; k < 2000; ++k) CHECK(bar_sampler(alpha, p, 3, 6.0, rng).state == 2);
  }
  SUBCASE("joint law against direct normalization on a grid") {
    const ParameterSet p = toy_params();
    const Eigen::Vector4d alpha(0.0, 0.45, 0.55, 0.0);
    const int next = 3;
    const double s_bar = 5.0;
    const int bins = 20;
    const double h = s_bar / bins;
    // Target mass per (state, bin) with a fine inner rule.
    std::map<std::string, double> target, got;
    double total = 0.0;
    for (int u : {1, 2})
      for (int b = 0; b < bins; ++b) {
        double mass = 0.0;
        const int inner = 200;
        for (int k = 0; k < inner; ++k) {
          const double w = (b + (k + 0.5) / inner) * h;
          mass += sojourn_pdf(p, u, w) * transition_fn(p, u, next, w) * h / inner;
        }
        mass *= alpha[u] / sojourn_cdf(p, u, s_bar);
        target[std::to_string(u) + "/" + std::to_string(b)] = mass;
        total += mass;
      }
    for (auto& [k, v] : target) v /= total;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
      const BarDraw d = bar_sampler(alpha, p, next, s_bar, rng);
      REQUIRE(d.duration < s_bar);
      got[std::to_string(d.state) + "/" + std::to_string(static_cast<int>(d.duration / h))] += 1.0 / n;
    }
    CHECK(tv(got, target) <= 0.02);
  }
  SUBCASE("an unreachable successor exhausts the proposal budget") {
    ParameterSet p = toy_params();
    p.eta.setConstant(0.0);
    p.eta(1, 3) = p.eta(2, 3) = -60.0;
    const Eigen::Vector4d alpha(0.0, 0.5, 0.5, 0.0);
    CHECK_THROWS_AS(bar_sampler(alpha, p, 3, 5.0, rng, 1000), Error);
  }
}

TEST_CASE("initiality probability") {
  const ParameterSet p = toy_params();
  const Kernel kern(p, 30.0, 0.02);
  EntryPassOptions opt;
  opt.step = 0.25;
  const EntryPass pass(p, kern, 30.0, opt);
  CHECK(pass.initiality_probability(3, 0.1) >= 0.99);

  ParameterSet q = p;
  q.initial = Eigen::Vector4d(0.0, 0.0, 0.0, 1.0);
  const Kernel kq(q, 30.0, 0.02);
  const EntryPass pq(q, kq, 30.0, opt);
  CHECK_THROWS_AS(pq.initiality_probability(3, 2.0), Error);

  // Simulation: among paths that enter the catastrophic state close to tau, the share whose
  // predecessor visit was the first one.
  const double tau = 2.5, half = 0.1;
  Rng rng(4);
  int near = 0, first = 0;
  for (int d = 0; d < 1000000; ++d) {
    const Trajectory x = sample_trajectory(p, rng);
    if (x.states.back() != 3 || x.states.size() < 2) continue;
    const double entry = x.entry_time(x.states.size() - 1);
    if (std::abs(entry - tau) > half) continue;
    ++near;
    first += x.states.size() == 2;
  }
  REQUIRE(near > 5000);
  const double mc = static_cast<double>(first) / near;
  CHECK(std::abs(pass.initiality_probability(3, tau) - mc) <= 0.02);
}

TEST_CASE("entry pass likelihood of the censor time without observations") {
  const ParameterSet p = reference_params();
  const Kernel kern(p, 60.0, 0.02);
  EntryPassOptions opt;
  opt.step = 0.25;
  const EntryPass pass(p, kern, 60.0, opt);
  Rng rng(5);
  const int runs = 400000;
  const double width = 1.0;
  std::map<int, int> hits;
  for (int d = 0; d < runs; ++d) {
    const Trajectory x = sample_trajectory(p, rng);
    if (x.states.back() == 2) ++hits[static_cast<int>(x.total() / width)];
  }
  for (int bin : {4, 8, 12, 20}) {
    const double mc = hits[bin] / (runs * width);
    double model = 0.0;
    for (int k = 0; k < 10; ++k) model += std::exp(pass.log_likelihood((bin + (k + 0.5) / 10.0) * width, 2)) / 10.0;
    const double se = std::sqrt(mc / (runs * width));
    CHECK(std::abs(model - mc) <= 4.0 * se + 0.02 * mc);
  }
}

TEST_CASE("backward sampling") {
  const ParameterSet p = toy_params();
  const Kernel kern(p, 60.0, 0.02);
  EntryPassOptions opt;
  opt.step = 0.1;

  SUBCASE("paths end in the label at the censor time") {
    Rng rng(6);
    for (const Episode& e : generate(p, 40, 12, {})) {
      const EntryPass pass(p, kern, e, opt);
      for (int g = 0; g < 5; ++g) {
        BackwardStats stats;
        const Trajectory x = backward_sample(pass, e.censor_time, e.label, rng, &stats);
        CHECK(x.states.back() == e.label);
        double total = 0.0;
        for (std::size_t k = 0; k < x.states.size(); ++k) {
          CHECK(x.sojourns[k] >= 0.0);
          total += x.sojourns[k];
          if (k + 1 < x.states.size()) {
            CHECK(!p.is_absorbing(x.states[k]));
            CHECK(x.states[k] != x.states[k + 1]);
          }
        }
        CHECK(total == doctest::Approx(e.censor_time).epsilon(1e-12));
        CHECK(stats.proposals <= 10 * static_cast<long>(x.states.size()) + 50);
      }
    }
  }

  SUBCASE("without observations the sampler matches forward rejection") {
    // Keep forward draws whose censor time lands in [6, 7) with the catastrophic label, then
    // draw one backward path at each kept censor time.
    Rng fwd(7), bwd(8);
    const EntryPass pass(p, kern, 60.0, opt);
    std::map<std::string, double> a, b;
    std::vector<double> kept;
    while (kept.size() < 20000) {
      const Trajectory x = sample_trajectory(p, fwd);
      if (x.states.back() != 3 || x.total() < 6.0 || x.total() >= 7.0) continue;
      kept.push_back(x.total());
      a[shape_of(x)] += 1.0;
    }
    long proposals = 0, steps = 0;
    for (double tc : kept) {
      BackwardStats stats;
      const Trajectory y = backward_sample(pass, tc, 3, bwd, &stats);
      proposals += stats.proposals;
      steps += static_cast<long>(y.states.size());
      b[shape_of(y)] += 1.0;
    }
    for (auto& [k, v] : a) v /= kept.size();
    for (auto& [k, v] : b) v /= kept.size();
    const double dist = tv(a, b);
    MESSAGE("backward vs forward-rejection TV " << dist);
    CHECK(dist <= 0.05);
    CHECK(proposals <= 10 * steps);
  }
}

TEST_CASE("complete log density splits by parameter block") {
  const ParameterSet p = toy_params();
  Episode e;
  e.times = {0.5, 1.2, 2.0, 3.1};
  e.values = Eigen::Vector4d(0.1, 1.4, 1.7, 4.2);
  e.censor_time = 3.5;
  e.label = 3;
  Trajectory x;
  x.states = {1, 2, 3};
  x.sojourns = {1.0, 1.5, 1.0};
  const CompleteLogDensity c = complete_log_density(p, e, x);
  CHECK(c.initial == doctest::Approx(std::log(0.6)));
  CHECK(c.sojourn == doctest::Approx(sojourn_log_pdf(p, 1, 1.0) + sojourn_log_pdf(p, 2, 1.5) + sojourn_log_pdf(p, 3, 1.0)));
  CHECK(c.transition == doctest::Approx(log_transition_fn(p, 1, 2, 1.0) + log_transition_fn(p, 2, 3, 1.5)));
  auto seg = [&](int s, int a, int b) {
    Segment g;
    g.times.assign(e.times.begin() + a, e.times.begin() + b);
    g.values = e.values.middleRows(a, b - a);
    return segment_log_density(p.emission[s], g);
  };
  CHECK(c.emission == doctest::Approx(seg(1, 0, 1) + seg(2, 1, 3) + seg(3, 3, 4)));
  CHECK(c.total() == doctest::Approx(c.initial + c.sojourn + c.transition + c.emission));

  const auto ranges = visit_ranges(x, e.times);
  REQUIRE(ranges.size() == 3);
  CHECK(ranges[0] == std::pair{0, 1});
  CHECK(ranges[1] == std::pair{1, 3});
  CHECK(ranges[2] == std::pair{3, 4});
}
