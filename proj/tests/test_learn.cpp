#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hasmm/error.hpp"
#include "hasmm/generate.hpp"
#include "hasmm/learn.hpp"
#include "hasmm/reference.hpp"
#include "hasmm/sampling.hpp"

using namespace hasmm;

namespace {

std::vector<std::vector<Trajectory>> truth_paths(const std::vector<Episode>& eps) {
  std::vector<std::vector<Trajectory>> out;
  for (const auto& e : eps) out.push_back({*e.truth});
  return out;
}

std::vector<std::vector<double>> unit_weights(const SampleSet& s) {
  std::vector<std::vector<double>> w(s.episodes());
  for (int d = 0; d < s.episodes(); ++d) w[d].assign(s.samples(d), 1.0);
  return w;
}

double mean_sojourn(const ParameterSet& p, int i) { return p.sojourn[i].shape / p.sojourn[i].rate; }

LearnConfig quick_config() {
  LearnConfig cfg;
  cfg.samples = 5;
  cfg.max_iter = 3;
  cfg.entry_step = 0.5;
  cfg.track_loglik = false;
  return cfg;
}

}  // namespace

TEST_CASE("importance weights at the base parameters are all one") {
  const ParameterSet p = reference_params();
  const auto eps = generate(p, 10, 3, {});
  LearnConfig cfg = quick_config();
  const SampleSet s(eps, draw_paths(p, eps, cfg, 0), p);
  const auto w = s.weights(p);
  for (const auto& row : w)
    for (double x : row) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.min_ess(w) == doctest::Approx(cfg.samples));

  ParameterSet q = p;
  q.sojourn[1].rate *= 1.3;
  const auto wq = s.weights(q);
  for (const auto& row : wq) CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(row.size()));
}

TEST_CASE("objective of a single path is its complete log density") {
  const ParameterSet p = reference_params();
  const auto eps = generate(p, 1, 9, {});
  const SampleSet s(eps, truth_paths(eps), p);
  const double direct = complete_log_density(p, eps[0], *eps[0].truth).total();
  CHECK(s.objective(p, unit_weights(s)) == doctest::Approx(direct).epsilon(1e-10));
  ParameterSet q = p;
  q.emission[1].mean[0] += 0.5;
  CHECK(s.objective(q, unit_weights(s)) == doctest::Approx(complete_log_density(q, eps[0], *eps[0].truth).total()).epsilon(1e-10));
}

TEST_CASE("identical paths make the initial law a point mass") {
  const ParameterSet p = toy_params();
  auto eps = generate(p, 20, 4, {});
  const Trajectory x = *eps[0].truth;
  std::vector<std::vector<Trajectory>> paths;
  for (auto& e : eps) {
    e = eps[0];
    paths.push_back({x, x});
  }
  const SampleSet s(eps, paths, p);
  const ParameterSet q = m_step(s, unit_weights(s), p);
  CHECK(q.initial[x.states[0]] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("supervised limit recovers the generating parameters") {
  ParameterSet truth = reference_params();
  truth.beta.setZero();
  const auto eps = generate(truth, 500, 15, {});
  const SampleSet s(eps, truth_paths(eps), truth);
  ParameterSet p = truth;
  for (auto& g : p.sojourn) g = {1.5, 0.5 * g.rate};
  p.eta(1, 2) = 0.7;
  for (auto& h : p.emission) h.mean.array() += 0.8;
  MStepReport rep;
  for (int k = 0; k < 5; ++k) {
    const ParameterSet next = m_step(s, unit_weights(s), p, &rep);
    CHECK(rep.after >= rep.before - 1e-6 * std::abs(rep.before));
    p = next;
  }
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(mean_sojourn(p, i) / mean_sojourn(truth, i) - 1.0) <= 0.10);
  CHECK(std::abs(p.beta(1, 2) - p.beta(1, 0)) <= 0.05);
  CHECK(std::abs((p.eta(1, 2) - p.eta(1, 0)) - (truth.eta(1, 2) - truth.eta(1, 0))) <= 0.3);
  for (int i = 0; i < 3; ++i)
    for (int l = 0; l < 2; ++l) CHECK(std::abs(p.emission[i].mean[l] - truth.emission[i].mean[l]) <= 0.5);
}

TEST_CASE("generalized M-step never lowers the objective") {
  const ParameterSet p = toy_params();
  const auto eps = generate(p, 30, 6, {});
  LearnConfig cfg = quick_config();
  ParameterSet start = p;
  for (auto& g : start.sojourn) g.rate *= 0.7;
  start.eta.setZero();
  start.beta.setZero();
  const SampleSet s(eps, draw_paths(start, eps, cfg, 0), start);
  ParameterSet cur = start;
  for (int z = 0; z < 4; ++z) {
    const auto w = s.weights(cur);
    MStepReport rep;
    const ParameterSet next = m_step(s, w, cur, &rep);
    CHECK(rep.after >= rep.before - 1e-6 * std::abs(rep.before));
    CHECK(s.objective(next, w) >= s.objective(cur, w) - 1e-6 * std::abs(s.objective(cur, w)));
    CHECK_NOTHROW(validate(next));
    cur = next;
  }
}

TEST_CASE("learning runs at degenerate sizes") {
  const ParameterSet p = reference_params();
  const auto eps = generate(p, 1, 21, {});
  LearnConfig cfg = quick_config();
  cfg.samples = 1;
  cfg.track_loglik = true;
  const LearnResult r = ffbs_mcem(eps, initial_guess(eps, 3, cfg), cfg);
  CHECK_NOTHROW(validate(r.params));
  CHECK(r.trace.size() >= 1);
  CHECK(std::isfinite(r.loglik));
  CHECK(r.trace.front().iter == 0);
}

TEST_CASE("learning is reproducible across thread counts") {
  const ParameterSet p = reference_params();
  const auto eps = generate(p, 40, 33, {});
  LearnConfig cfg = quick_config();
  cfg.samples = 6;
  cfg.max_iter = 4;
  const LearnResult a = ffbs_mcem(eps, p, cfg);
  cfg.threads = 3;
  const LearnResult b = ffbs_mcem(eps, p, cfg);
  CHECK(to_json(a.params) == to_json(b.params));
  for (std::size_t z = 1; z < a.trace.size(); ++z)
    CHECK(a.trace[z].objective >= a.trace[z].objective_prev - 1e-6 * std::abs(a.trace[z].objective_prev));
}

TEST_CASE("starting at the generating parameters stays close to them") {
  // Absorbing sojourns are fitted from roughly a hundred visits each, so they are held to four
  // standard errors of a gamma mean rather than to a fixed relative band.
  const ParameterSet p = reference_params();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto eps = generate(p, 200, seed, {});
    LearnConfig cfg = quick_config();
    cfg.samples = 20;
    cfg.max_iter = 10;
    cfg.epsilon = 0.0;
    cfg.seed = seed;
    const ParameterSet q = ffbs_mcem(eps, p, cfg).params;
    CHECK(std::abs(mean_sojourn(q, 1) / mean_sojourn(p, 1) - 1.0) <= 0.05);
    for (int i : {0, 2}) {
      int visits = 0;
      for (const auto& e : eps) visits += e.label == i;
      const double se = 1.0 / std::sqrt(p.sojourn[i].shape * visits);
      CHECK(std::abs(mean_sojourn(q, i) / mean_sojourn(p, i) - 1.0) <= 4.0 * se);
    }
    for (int i = 0; i < 3; ++i) {
      const auto& h = q.emission[i];
      const auto& t = p.emission[i];
      // Stream means are compared on the scale of the GP amplitude.
      for (int l = 0; l < 2; ++l) CHECK(std::abs(h.mean[l] - t.mean[l]) <= 0.25 * t.sigma);
      CHECK(std::abs(h.sigma / t.sigma - 1.0) <= 0.05);
      CHECK(std::abs(h.length_scale / t.length_scale - 1.0) <= 0.075);
    }
  }
}

TEST_CASE("state permutations") {
  const ParameterSet p = toy_params();
  const ParameterSet swapped = permute_states(p, {0, 2, 1, 3});
  CHECK(swapped.sojourn[1].rate == p.sojourn[2].rate);
  CHECK(swapped.eta(1, 3) == p.eta(2, 3));
  CHECK(swapped.emission[2].mean == p.emission[1].mean);
  CHECK(to_json(permute_states(swapped, {0, 2, 1, 3})) == to_json(p));
  for (double s : {0.0, 2.0, 7.0})
    CHECK(transition_fn(swapped, 2, 3, s) == doctest::Approx(transition_fn(p, 1, 3, s)));

  const ParameterSet c = canonical_relabel(swapped);
  const Eigen::VectorXd a = absorption_probabilities(c);
  CHECK(a[1] <= a[2]);
  CHECK(to_json(canonical_relabel(c)) == to_json(c));
  CHECK_THROWS_AS(permute_states(p, {0, 1}), Error);
}

TEST_CASE("parameter count and information criterion") {
  // N = 3, Q = 2: initial 2, sojourn 6, one transient row with eta and beta each one free value,
  // emission per state 2 means + 2 task-covariance entries beyond the fixed scale + sigma, ell, jitter.
  CHECK(parameter_count(reference_params()) == 2 + 6 + 2 + 3 * (2 + 2 + 3));
  // N = 4, Q = 1: 3 + 8 + 2 rows * 4 + 4 * (1 + 0 + 3).
  CHECK(parameter_count(toy_params()) == 3 + 8 + 8 + 16);
  CHECK(bic_score(-100.0, 10, 1000) == doctest::Approx(200.0 + 10.0 * std::log(1000.0)));

  const auto eps = generate(reference_params(), 8, 2, {});
  const BicResult one = bic_select(eps, {3}, quick_config());
  CHECK(one.n_states == 3);
  REQUIRE(one.candidates.size() == 1);
  CHECK(!one.candidates[0].failed);
}

TEST_CASE("episode helpers") {
  const auto eps = generate(toy_params(), 50, 8, {});
  double obs = 0.0, time = 0.0;
  for (const auto& e : eps) {
    obs += e.size();
    time += e.censor_time;
  }
  CHECK(estimate_intensity(eps) == doctest::Approx(obs / time));

  const auto moved = retarget_labels(eps, 6);
  for (std::size_t d = 0; d < eps.size(); ++d) {
    CHECK(moved[d].label == (eps[d].label == 0 ? 0 : 5));
    CHECK(!moved[d].truth.has_value());
    CHECK(moved[d].times == eps[d].times);
  }
}
