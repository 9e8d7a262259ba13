// hasmm: generate episodes, build transition tables, filter and score, learn, evaluate.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "hasmm/error.hpp"
#include "hasmm/eval.hpp"
#include "hasmm/filter.hpp"
#include "hasmm/generate.hpp"
#include "hasmm/learn.hpp"
#include "hasmm/parallel.hpp"
#include "hasmm/reference.hpp"
#include "hasmm/sampling.hpp"
#include "hasmm/volterra.hpp"

#ifndef HASMM_VERSION
#define HASMM_VERSION "0.0.0"
#endif

using namespace hasmm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;
constexpr int kExitFingerprint = 4;
constexpr int kExitNumerical = 5;
constexpr int kExitIo = 6;
constexpr int kExitSelftest = 7;

const char* kExitHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage error (unknown flag, missing or bad option)\n"
    "  3  malformed input file or invalid parameters\n"
    "  4  table fingerprint does not match the parameters\n"
    "  5  numerical or convergence failure\n"
    "  6  file cannot be read or written\n"
    "  7  self-test reported a failure\n"
    "Errors are printed to stderr as one JSON object {error, message, exit_code}.\n"
    "HASMM_LOG sets the log level (trace, debug, info, warn, error, off; default warn).";

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return kExitUsage;
    case ErrorKind::MalformedInput:
    case ErrorKind::InvalidParameters: return kExitInput;
    case ErrorKind::FingerprintMismatch: return kExitFingerprint;
    case ErrorKind::Numerical:
    case ErrorKind::Convergence: return kExitNumerical;
    case ErrorKind::Io: return kExitIo;
  }
  return kExitInternal;
}

void report_error(const std::string& kind, const std::string& message, int code) {
  json j;
  j["error"] = kind;
  j["message"] = message;
  j["exit_code"] = code;
  std::cerr << j.dump() << "\n";
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  return out;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string num(double x) {
  if (std::isnan(x)) return "nan";
  return fmt::format("{:.17g}", x);
}

struct Common {
  std::uint64_t seed = 1;
  int threads = 1;
  bool deterministic = false;
};

// Every output file gets a sidecar <out>.provenance.json.
class Provenance {
 public:
  Provenance(std::string subcommand, const Common& c) : sub_(std::move(subcommand)), common_(c) {
    start_ = std::chrono::steady_clock::now();
  }
  void config(const std::string& key, json value) { config_[key] = std::move(value); }
  void input(const std::string& path) { inputs_[path] = hex64(fnv1a(read_file(path))); }

  void write(const std::string& out) const {
    json j;
    j["tool"] = "hasmm";
    j["version"] = HASMM_VERSION;
    j["subcommand"] = sub_;
    j["seed"] = common_.seed;
    j["config"] = config_;
    j["config_hash"] = hex64(fnv1a(config_.dump()));
    j["inputs"] = inputs_;
    j["output"] = fs::path(out).filename().string();
    if (common_.deterministic) {
      j["created"] = nullptr;
      j["wall_time"] = 0.0;
    } else {
      const std::time_t now = std::time(nullptr);
      char buf[32];
      std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
      j["created"] = buf;
      j["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    open_out(out + ".provenance.json") << j.dump(2) << "\n";
  }

 private:
  std::string sub_;
  Common common_;
  json config_ = json::object();
  std::map<std::string, std::string> inputs_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string params, out;
  int count = 0;
  double missing_rate = 0.0;
  bool no_truth = false;
};

int run_generate(const GenerateArgs& a, const Common& c) {
  const ParameterSet p = load_params(a.params);
  GenerateOptions opt;
  opt.missing_rate = a.missing_rate;
  opt.with_truth = !a.no_truth;
  const auto eps = generate(p, a.count, c.seed, opt, c.threads);
  write_episodes(eps, a.out);
  Provenance prov("generate", c);
  prov.input(a.params);
  prov.config("count", a.count);
  prov.config("missing_rate", a.missing_rate);
  prov.config("with_truth", opt.with_truth);
  prov.write(a.out);
  spdlog::info("generate: {} episodes written to {}", eps.size(), a.out);
  return kExitOk;
}

struct TableArgs {
  std::string params, out;
  double grid_dt = 1.0;
  int grid_a = 0, grid_b = 0, grid_c = 0;
  double epsilon = 1e-6;
  int max_iter = 200;
};

TableGrid table_grid(const ParameterSet& p, const TableArgs& a, const VolterraOptions& opt) {
  require(a.grid_dt > 0.0, ErrorKind::Usage, "--grid-dt must be positive");
  TableGrid g = default_grid(p, a.grid_dt, opt);
  if (a.grid_a > 0) g.A = a.grid_a;
  if (a.grid_b > 0) g.B = a.grid_b;
  if (a.grid_c > 0) g.C = a.grid_c;
  return g;
}

json grid_json(const TableGrid& g) {
  return {{"d_tau", g.d_tau}, {"d_lo", g.d_lo}, {"d_hi", g.d_hi}, {"A", g.A}, {"B", g.B}, {"C", g.C}};
}

int run_build_table(const TableArgs& a, const Common& c) {
  const ParameterSet p = load_params(a.params);
  VolterraOptions opt;
  opt.epsilon = a.epsilon;
  opt.max_iter = a.max_iter;
  opt.threads = c.threads;
  const TableGrid g = table_grid(p, a, opt);
  const TransitionTable t = build_table(p, g, opt);
  t.save(a.out);
  Provenance prov("build-table", c);
  prov.input(a.params);
  prov.config("grid", grid_json(g));
  prov.config("epsilon", a.epsilon);
  prov.config("max_iter", a.max_iter);
  prov.config("fingerprint", hex64(t.fingerprint));
  prov.write(a.out);
  spdlog::info("build-table: converged in {} iterations, written to {}", t.iterations, a.out);
  return kExitOk;
}

struct FilterArgs {
  std::string params, table, episodes, out;
  double lag_quantile = 0.9;
  int emission_window = 24;
  TableArgs grid;  // used by score when the table has to be built
};

// The table cached beside the parameter file, rebuilt when missing or stale.
TransitionTable cached_table(const ParameterSet& p, const FilterArgs& a, const Common& c, std::string* path) {
  *path = a.params + ".table";
  if (fs::exists(*path)) {
    try {
      return TransitionTable::load(*path, &p);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::FingerprintMismatch && e.kind() != ErrorKind::MalformedInput) throw;
      spdlog::warn("score: cached table {} is stale ({}), rebuilding", *path, e.what());
    }
  }
  VolterraOptions opt;
  opt.epsilon = a.grid.epsilon;
  opt.max_iter = a.grid.max_iter;
  opt.threads = c.threads;
  TransitionTable t = build_table(p, table_grid(p, a.grid, opt), opt);
  t.save(*path);
  spdlog::info("score: built table and cached it at {}", *path);
  return t;
}

int run_filter_cmd(const FilterArgs& a, const Common& c, bool score) {
  const ParameterSet p = load_params(a.params);
  std::string table_path = a.table;
  TransitionTable table;
  if (!a.table.empty()) table = TransitionTable::load(a.table, &p);
  else if (score) table = cached_table(p, a, c, &table_path);
  else throw Error(ErrorKind::Usage, "filter needs --table (score builds one when absent)");

  const auto eps = read_episodes(a.episodes, p.n_states, p.n_streams());
  FilterOptions opt;
  opt.lag_quantile = a.lag_quantile;
  opt.emission_window = a.emission_window;
  std::vector<std::vector<PosteriorSnapshot>> snaps(eps.size());
  std::vector<long> saturated(eps.size(), 0);
  parallel_for(static_cast<int>(eps.size()), c.threads, [&](int d) {
    ForwardFilter f(p, table, opt);
    f.reset(eps[d].id);
    for (int k = 0; k < eps[d].size(); ++k) snaps[d].push_back(f.push(eps[d].times[k], eps[d].values.row(k)));
    saturated[d] = f.saturated_queries();
  });
  auto out = open_out(a.out);
  long sat = 0;
  for (std::size_t d = 0; d < eps.size(); ++d) {
    sat += saturated[d];
    for (const auto& s : snaps[d]) out << snapshot_to_json(s).dump() << "\n";
  }
  if (sat > 0) spdlog::warn("{}: {} table lookups fell outside the grid and were clamped", score ? "score" : "filter", sat);
  Provenance prov(score ? "score" : "filter", c);
  prov.input(a.params);
  prov.input(table_path);
  prov.input(a.episodes);
  prov.config("lag_quantile", a.lag_quantile);
  prov.config("emission_window", a.emission_window);
  prov.config("table_fingerprint", hex64(table.fingerprint));
  prov.write(a.out);
  return kExitOk;
}

struct LearnArgs {
  std::string episodes, config, init, out, trace;
  int n_states = 0;
  std::vector<int> candidates;
  std::optional<int> samples, max_iter;
  std::optional<double> epsilon;
  bool ess_refresh = false;
};

LearnConfig learn_config(const LearnArgs& a, const Common& c, int* n_states, std::vector<int>* candidates) {
  LearnConfig cfg;
  if (!a.config.empty()) {
    json j;
    try {
      j = json::parse(read_file(a.config));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput, a.config + ": " + e.what());
    }
    require(j.is_object(), ErrorKind::MalformedInput, a.config + ": expected a JSON object");
    static const std::vector<std::string> keys{"samples", "max_iter", "epsilon", "ess_refresh", "entry_step",
                                               "emission_window", "kernel_step", "n_states", "candidates",
                                               "seed", "track_loglik"};
    try {
      for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end())
          throw Error(ErrorKind::MalformedInput, a.config + ": unknown key '" + k + "'");
      }
      cfg.samples = j.value("samples", cfg.samples);
      cfg.max_iter = j.value("max_iter", cfg.max_iter);
      cfg.epsilon = j.value("epsilon", cfg.epsilon);
      cfg.ess_refresh = j.value("ess_refresh", cfg.ess_refresh);
      cfg.entry_step = j.value("entry_step", cfg.entry_step);
      cfg.emission_window = j.value("emission_window", cfg.emission_window);
      cfg.kernel_step = j.value("kernel_step", cfg.kernel_step);
      cfg.track_loglik = j.value("track_loglik", cfg.track_loglik);
      cfg.seed = j.value("seed", cfg.seed);
      *n_states = j.value("n_states", *n_states);
      if (j.contains("candidates")) *candidates = j.at("candidates").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput, a.config + ": " + e.what());
    }
  }
  // Command-line flags win over the config file.
  if (a.samples) cfg.samples = *a.samples;
  if (a.max_iter) cfg.max_iter = *a.max_iter;
  if (a.epsilon) cfg.epsilon = *a.epsilon;
  if (a.ess_refresh) cfg.ess_refresh = true;
  if (a.n_states > 0) *n_states = a.n_states;
  if (!a.candidates.empty()) *candidates = a.candidates;
  cfg.threads = c.threads;
  return cfg;
}

json config_json(const LearnConfig& cfg) {
  return {{"samples", cfg.samples},         {"max_iter", cfg.max_iter},
          {"epsilon", cfg.epsilon},         {"ess_refresh", cfg.ess_refresh},
          {"entry_step", cfg.entry_step},   {"emission_window", cfg.emission_window},
          {"kernel_step", cfg.kernel_step}, {"track_loglik", cfg.track_loglik},
          {"seed", cfg.seed}};
}

void write_trace(const std::vector<IterationRecord>& trace, const std::string& path, bool deterministic) {
  auto out = open_out(path);
  out << "iter,q_hat,q_hat_prev,est_loglik,min_ess,wall_time,refreshed,reverted\n";
  for (const auto& r : trace) {
    std::string reverted;
    for (const auto& b : r.reverted) reverted += (reverted.empty() ? "" : ";") + b;
    out << r.iter << "," << num(r.objective) << "," << num(r.objective_prev) << "," << num(r.loglik) << ","
        << num(r.min_ess) << "," << num(deterministic ? 0.0 : r.wall_time) << "," << (r.refreshed ? 1 : 0) << ","
        << reverted << "\n";
  }
}

int run_learn(const LearnArgs& a, Common c, bool seed_given) {
  int n_states = 3;
  std::vector<int> candidates;
  LearnConfig cfg = learn_config(a, c, &n_states, &candidates);
  if (seed_given) cfg.seed = c.seed;
  c.seed = cfg.seed;

  const EpisodeFileShape shape = probe_episodes(a.episodes);
  const auto raw = read_episodes(a.episodes, std::max(shape.max_label, 2), shape.n_streams);
  const std::string trace_path = a.trace.empty() ? a.out + ".trace.csv" : a.trace;
  Provenance prov("learn", c);
  prov.input(a.episodes);
  if (!a.config.empty()) prov.input(a.config);
  prov.config("learn", config_json(cfg));

  if (!candidates.empty()) {
    require(a.init.empty(), ErrorKind::Usage, "--init and --candidates are exclusive");
    const BicResult bic = bic_select(raw, candidates, cfg);
    save_params(bic.params, a.out);
    json summary = json::array();
    for (const auto& cand : bic.candidates) {
      json row = {{"n_states", cand.n_states}, {"failed", cand.failed}};
      if (cand.failed) row["error"] = cand.error;
      else row.update({{"loglik", cand.loglik}, {"bic", cand.bic}, {"parameters", parameter_count(cand.params)}});
      summary.push_back(row);
    }
    open_out(a.out + ".bic.json") << json({{"selected", bic.n_states}, {"candidates", summary}}).dump(2) << "\n";
    prov.config("candidates", candidates);
    prov.write(a.out);
    spdlog::info("learn: BIC selected N={}", bic.n_states);
    return kExitOk;
  }

  ParameterSet init;
  std::vector<Episode> data;
  if (!a.init.empty()) {
    init = load_params(a.init);
    prov.input(a.init);
    data = retarget_labels(raw, init.n_states);
    for (auto& e : data) validate(e, init);
  } else {
    data = retarget_labels(raw, n_states);
    init = initial_guess(data, n_states, cfg);
  }
  prov.config("n_states", init.n_states);
  const LearnResult res = ffbs_mcem(data, init, cfg);
  save_params(res.params, a.out);
  write_trace(res.trace, trace_path, c.deterministic);
  prov.config("converged", res.converged);
  prov.write(a.out);
  prov.write(trace_path);
  return kExitOk;
}

struct EvaluateArgs {
  std::string scores, episodes, out, summary, sweep;
  double target_tpr = 0.5;
};

std::vector<double> parse_sweep(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
  require(parts.size() == 3, ErrorKind::Usage, "--threshold-sweep expects lo:hi:steps");
  double lo, hi;
  int steps;
  try {
    lo = std::stod(parts[0]);
    hi = std::stod(parts[1]);
    steps = std::stoi(parts[2]);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Usage, "--threshold-sweep expects lo:hi:steps");
  }
  require(steps >= 2 && hi > lo, ErrorKind::Usage, "--threshold-sweep needs hi > lo and at least 2 steps");
  std::vector<double> out(steps);
  for (int k = 0; k < steps; ++k) out[k] = lo + (hi - lo) * k / (steps - 1);
  return out;
}

int run_evaluate(const EvaluateArgs& a, const Common& c) {
  const EpisodeFileShape shape = probe_episodes(a.episodes);
  const auto eps = read_episodes(a.episodes, std::max(shape.max_label, 2), shape.n_streams);
  std::map<std::string, std::size_t> index;
  std::vector<ScoredEpisode> scored;
  for (const auto& e : eps) {
    require(!index.count(e.id), ErrorKind::MalformedInput, "duplicate episode id " + e.id);
    index[e.id] = scored.size();
    scored.push_back(score_episode(e, {}));
    scored.back().label = e.label == 0 ? 0 : 1;
  }
  std::ifstream in(a.scores);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + a.scores);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PosteriorSnapshot s;
    try {
      s = snapshot_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedInput, a.scores + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto it = index.find(s.id);
    require(it != index.end(), ErrorKind::MalformedInput, "scores mention unknown episode " + s.id);
    auto& se = scored[it->second];
    require(se.times.empty() || s.t >= se.times.back(), ErrorKind::MalformedInput,
            "scores for episode " + s.id + " are not sorted in time");
    require(!std::isnan(s.risk), ErrorKind::MalformedInput, "score for episode " + s.id + " has no risk");
    se.times.push_back(s.t);
    se.risk.push_back(s.risk);
  }

  const RocCurve curve = a.sweep.empty() ? roc_from_scores(scored, 1) : roc_curve(scored, parse_sweep(a.sweep), 1);
  auto out = open_out(a.out);
  out << "threshold,tpr,ppv\n";
  for (const auto& pt : curve.points) out << num(pt.threshold) << "," << num(pt.tpr) << "," << num(pt.ppv) << "\n";

  int positives = 0;
  for (const auto& s : scored) positives += s.label == 1;
  const auto op = operating_point(scored, curve, a.target_tpr, 1);
  json summary;
  summary["auc"] = curve.auc;
  summary["prevalence"] = static_cast<double>(positives) / scored.size();
  summary["episodes"] = scored.size();
  summary["positives"] = positives;
  summary["omitted_thresholds"] = curve.omitted;
  summary["target_tpr"] = a.target_tpr;
  summary["threshold_at_tpr50"] = op ? json(op->threshold) : json(nullptr);
  summary["timeliness_at_tpr50"] = op && op->timeliness ? json(*op->timeliness) : json(nullptr);
  const std::string summary_path = a.summary.empty() ? a.out + ".summary.json" : a.summary;
  open_out(summary_path) << summary.dump(2) << "\n";

  Provenance prov("evaluate", c);
  prov.input(a.scores);
  prov.input(a.episodes);
  prov.config("threshold_sweep", a.sweep);
  prov.config("target_tpr", a.target_tpr);
  prov.write(a.out);
  prov.write(summary_path);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Self-test: small instances of the oracle checks.

struct Check {
  std::string name;
  bool pass;
  std::string detail;
};

Check check_ctmc() {
  const ParameterSet p = ctmc_params(2);
  TableGrid g;
  g.d_tau = g.d_lo = g.d_hi = 0.5;
  g.A = 100;
  g.B = g.C = 1;
  const TransitionTable t = build_table(p, g);
  std::vector<double> taus;
  for (int a = 0; a <= g.A; ++a) taus.push_back(a * g.d_tau);
  const auto ref = oracle_ctmc(p, taus);
  double worst = 0.0;
  for (int a = 0; a <= g.A; ++a) worst = std::max(worst, (t.matrix(a, 0, 0) - ref[a]).cwiseAbs().maxCoeff());
  return {"ctmc", worst <= 5e-3, fmt::format("max abs difference {:.2e} (limit 5e-3)", worst)};
}

Check check_enumeration() {
  const ParameterSet p = toy_params();
  TableGrid g = default_grid(p, 0.1);
  const TransitionTable t = build_table(p, g);
  FilterOptions opt;
  opt.compute_risk = false;
  double worst = 0.0;
  for (int d = 0; d < 4; ++d) {
    Rng rng(derive_seed(11, 0x73656c66, d));
    Episode e = generate_episode(p, rng, {}, std::to_string(d));
    if (e.size() > 3) {
      e.times.resize(3);
      e.values.conservativeResize(3, Eigen::NoChange);
    }
    if (e.size() == 0) continue;
    const auto snaps = run_filter(p, t, e, opt);
    const auto ref = oracle_enumerate(p, e, 0.02, 8);
    for (int m = 0; m < e.size(); ++m) worst = std::max(worst, 0.5 * (snaps[m].posterior - ref[m]).cwiseAbs().sum());
  }
  return {"enumeration", worst <= 0.02, fmt::format("max posterior TV {:.4f} (limit 0.02)", worst)};
}

Check check_sampler() {
  const ParameterSet p = reference_params();
  // Transient state with shape 3: compare the truncated draws to the conditional CDF.
  const int state = 1;
  const double s_bar = 6.0;
  Rng rng(derive_seed(11, 0x6b73));
  const int n = 100000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = tr_sampler(p, state, s_bar, rng);
  std::sort(xs.begin(), xs.end());
  const double norm = sojourn_cdf(p, state, s_bar);
  double ks = 0.0;
  for (int k = 0; k < n; ++k) {
    const double f = sojourn_cdf(p, state, xs[k]) / norm;
    ks = std::max({ks, std::abs(f - static_cast<double>(k) / n), std::abs(f - static_cast<double>(k + 1) / n)});
  }
  return {"sampler_ks", ks <= 0.01, fmt::format("KS statistic {:.4f} (limit 0.01)", ks)};
}

int run_selftest(const Common&) {
  bool ok = true;
  for (auto* fn : {&check_ctmc, &check_enumeration, &check_sampler}) {
    Check c;
    try {
      c = fn();
    } catch (const Error& e) {
      c = {"?", false, e.what()};
    }
    ok = ok && c.pass;
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  }
  return ok ? kExitOk : kExitSelftest;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("hasmm");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("HASMM_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only honour names it actually knows.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Hidden absorbing semi-Markov models: simulate, filter, score, learn, evaluate."};
  app.footer(kExitHelp);
  app.require_subcommand(1);
  app.set_version_flag("--version", HASMM_VERSION);

  Common common;
  auto add_common = [&](CLI::App* sub, bool with_seed) {
    sub->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", common.deterministic, "normalize timestamps in provenance and traces");
    if (with_seed) sub->add_option("--seed", common.seed, "master seed");
  };

  GenerateArgs gen;
  auto* sub_gen = app.add_subcommand("generate", "simulate episodes from a parameter file");
  sub_gen->add_option("--params", gen.params, "parameter JSON")->required();
  sub_gen->add_option("--count", gen.count, "number of episodes")->required()->check(CLI::NonNegativeNumber);
  sub_gen->add_option("--out", gen.out, "episode JSONL")->required();
  sub_gen->add_option("--missing-rate", gen.missing_rate, "per-entry missingness")->check(CLI::Range(0.0, 1.0));
  sub_gen->add_flag("--no-truth", gen.no_truth, "omit hidden paths");
  add_common(sub_gen, true);

  TableArgs tab;
  auto add_grid = [](CLI::App* sub, TableArgs& t) {
    sub->add_option("--grid-dt", t.grid_dt, "grid step in hours for all three axes");
    sub->add_option("--grid-a", t.grid_a, "tau points (default: until absorption plateaus)");
    sub->add_option("--grid-b", t.grid_b, "elapsed lower-bound points");
    sub->add_option("--grid-c", t.grid_c, "elapsed upper-bound points");
    sub->add_option("--epsilon", t.epsilon, "fixed-point tolerance");
    sub->add_option("--max-iter", t.max_iter, "fixed-point iteration cap");
  };
  auto* sub_tab = app.add_subcommand("build-table", "solve for the interval transition table");
  sub_tab->add_option("--params", tab.params, "parameter JSON")->required();
  sub_tab->add_option("--out", tab.out, "binary table")->required();
  add_grid(sub_tab, tab);
  add_common(sub_tab, false);

  FilterArgs flt, scr;
  auto add_filter = [&](CLI::App* sub, FilterArgs& f, bool table_required) {
    sub->add_option("--params", f.params, "parameter JSON")->required();
    auto* t = sub->add_option("--table", f.table, "binary table");
    if (table_required) t->required();
    sub->add_option("--episodes", f.episodes, "episode JSONL")->required();
    sub->add_option("--out", f.out, "posterior JSONL")->required();
    sub->add_option("--lag-quantile", f.lag_quantile, "sojourn quantile beyond which entry windows merge");
    sub->add_option("--emission-window", f.emission_window, "observations a long visit conditions on");
    add_common(sub, false);
  };
  auto* sub_flt = app.add_subcommand("filter", "causal state posteriors and risk");
  add_filter(sub_flt, flt, true);
  auto* sub_scr = app.add_subcommand("score", "like filter, building and caching <params>.table if needed");
  add_filter(sub_scr, scr, false);
  add_grid(sub_scr, scr.grid);

  LearnArgs lrn;
  auto* sub_lrn = app.add_subcommand("learn", "fit parameters by Monte Carlo EM");
  sub_lrn->add_option("--episodes", lrn.episodes, "episode JSONL")->required();
  sub_lrn->add_option("--out", lrn.out, "fitted parameter JSON")->required();
  sub_lrn->add_option("--config", lrn.config, "learning configuration JSON");
  sub_lrn->add_option("--init", lrn.init, "starting parameters (default: k-means start)");
  sub_lrn->add_option("--trace", lrn.trace, "iteration trace CSV (default <out>.trace.csv)");
  sub_lrn->add_option("--n-states", lrn.n_states, "number of states");
  sub_lrn->add_option("--candidates", lrn.candidates, "state counts to compare by BIC")->delimiter(',');
  sub_lrn->add_option("--mc-samples", lrn.samples, "trajectories per episode (G)");
  sub_lrn->add_option("--max-iter", lrn.max_iter, "EM iterations");
  sub_lrn->add_option("--epsilon", lrn.epsilon, "relative parameter change that stops EM");
  sub_lrn->add_flag("--ess-refresh", lrn.ess_refresh, "redraw trajectories when the ESS drops below G/2");
  add_common(sub_lrn, true);

  EvaluateArgs ev;
  auto* sub_ev = app.add_subcommand("evaluate", "detection curve and early-warning summary");
  sub_ev->add_option("--scores", ev.scores, "posterior JSONL from score or filter")->required();
  sub_ev->add_option("--episodes", ev.episodes, "episode JSONL with labels and censor times")->required();
  sub_ev->add_option("--out", ev.out, "curve CSV (threshold, tpr, ppv)")->required();
  sub_ev->add_option("--summary", ev.summary, "summary JSON (default <out>.summary.json)");
  sub_ev->add_option("--threshold-sweep", ev.sweep, "lo:hi:steps (default: every distinct episode maximum)");
  sub_ev->add_option("--target-tpr", ev.target_tpr, "operating point for timeliness")->check(CLI::Range(0.0, 1.0));
  add_common(sub_ev, false);

  auto* sub_self = app.add_subcommand("selftest", "run the oracle checks on built-in instances");
  add_common(sub_self, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (*sub_gen) return run_generate(gen, common);
    if (*sub_tab) return run_build_table(tab, common);
    if (*sub_flt) return run_filter_cmd(flt, common, false);
    if (*sub_scr) return run_filter_cmd(scr, common, true);
    if (*sub_lrn) return run_learn(lrn, common, sub_lrn->count("--seed") > 0);
    if (*sub_ev) return run_evaluate(ev, common);
    if (*sub_self) return run_selftest(common);
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    report_error(to_string(e.kind()), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    report_error("internal", e.what(), kExitInternal);
    return kExitInternal;
  }
  return kExitUsage;
}
