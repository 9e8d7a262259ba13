#include "hasmm/generate.hpp"

#include <cmath>
#include <limits>

#include "hasmm/error.hpp"
#include "hasmm/parallel.hpp"

namespace hasmm {

Trajectory sample_trajectory(const ParameterSet& p, Rng& rng, int max_transitions) {
  Trajectory t;
  std::vector<double> init(p.initial.data(), p.initial.data() + p.initial.size());
  int x = rng.categorical(init);
  std::vector<double> row(p.n_states);
  for (int step = 0;; ++step) {
    if (step > max_transitions)
      throw Error(ErrorKind::Numerical, "trajectory exceeded " + std::to_string(max_transitions) + " transitions");
    const double s = rng.gamma(p.sojourn[x].shape, p.sojourn[x].rate);
    t.states.push_back(x);
    t.sojourns.push_back(s);
    if (p.is_absorbing(x)) break;
    for (int j = 0; j < p.n_states; ++j) row[j] = transition_fn(p, x, j, s);
    x = rng.categorical(row);
  }
  return t;
}

std::vector<double> sample_observation_times(double zeta, double censor_time, Rng& rng) {
  std::vector<double> times;
  double t = 0.0;
  for (;;) {
    t += rng.exponential(zeta);
    if (t > censor_time) break;
    times.push_back(t);
  }
  return times;
}

Episode generate_episode(const ParameterSet& p, Rng& rng, const GenerateOptions& opt, const std::string& id) {
  Episode e;
  e.id = id;
  Trajectory traj = sample_trajectory(p, rng, opt.max_transitions);
  e.censor_time = traj.total();
  e.label = traj.states.back();
  e.times = sample_observation_times(p.zeta, e.censor_time, rng);
  const int q = p.n_streams();
  e.values.resize(e.size(), q);
  double start = 0.0;
  int first = 0;
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    const bool last = k + 1 == traj.states.size();
    const double end = start + traj.sojourns[k];
    const int stop = last ? e.size() : first_at_or_after(e.times, end);
    std::vector<double> seg(e.times.begin() + first, e.times.begin() + stop);
    if (!seg.empty()) {
      SegmentSample smp = sample_segment(p.emission[traj.states[k]], seg, rng);
      e.values.middleRows(first, stop - first) = smp.values;
    }
    first = stop;
    start = end;
  }
  if (opt.missing_rate > 0.0) {
    for (int r = 0; r < e.values.rows(); ++r)
      for (int c = 0; c < q; ++c)
        if (rng.bernoulli(opt.missing_rate)) e.values(r, c) = std::numeric_limits<double>::quiet_NaN();
  }
  if (opt.with_truth) e.truth = std::move(traj);
  return e;
}

std::vector<Episode> generate(const ParameterSet& p, int count, std::uint64_t seed, const GenerateOptions& opt,
                              int threads) {
  validate(p);
  std::vector<Episode> out(count);
  parallel_for(count, threads, [&](int d) {
    Rng rng(derive_seed(seed, 0x67656eULL, static_cast<std::uint64_t>(d)));
    out[d] = generate_episode(p, rng, opt, std::to_string(d));
  });
  return out;
}

}  // namespace hasmm
