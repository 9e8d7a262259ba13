#include "hasmm/episode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "hasmm/error.hpp"

namespace hasmm {

double Trajectory::total() const { return std::accumulate(sojourns.begin(), sojourns.end(), 0.0); }

double Trajectory::entry_time(std::size_t k) const {
  return std::accumulate(sojourns.begin(), sojourns.begin() + static_cast<long>(k), 0.0);
}

int first_at_or_after(const std::vector<double>& times, double t) {
  return static_cast<int>(std::lower_bound(times.begin(), times.end(), t) - times.begin());
}

int first_after(const std::vector<double>& times, double t) {
  return static_cast<int>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
}

namespace {

void bad(const std::string& id, const std::string& msg) {
  throw Error(ErrorKind::MalformedInput, "episode '" + id + "': " + msg);
}

}  // namespace

void validate(const Episode& e, const ParameterSet& p) {
  if (!(e.censor_time > 0.0) || !std::isfinite(e.censor_time)) bad(e.id, "censor_time must be positive");
  if (e.label != p.safe() && e.label != p.catastrophic()) bad(e.id, "label must be 1 or N");
  for (std::size_t k = 0; k < e.times.size(); ++k) {
    if (!std::isfinite(e.times[k]) || e.times[k] < 0.0) bad(e.id, "times must be finite and non-negative");
    if (k > 0 && e.times[k] < e.times[k - 1]) bad(e.id, "times must be sorted");
    if (e.times[k] > e.censor_time) bad(e.id, "observation after censor_time");
  }
  if (e.values.rows() != e.size() || (e.size() > 0 && e.values.cols() != p.n_streams()))
    bad(e.id, "values must have one row of Q entries per time");
}

json episode_to_json(const Episode& e) {
  json j;
  j["id"] = e.id;
  j["times"] = e.times;
  json rows = json::array();
  for (int r = 0; r < e.values.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < e.values.cols(); ++c) {
      if (std::isnan(e.values(r, c))) row.push_back(nullptr);
      else row.push_back(e.values(r, c));
    }
    rows.push_back(row);
  }
  j["values"] = rows;
  j["censor_time"] = e.censor_time;
  j["label"] = e.label + 1;
  if (e.truth) {
    std::vector<int> states;
    for (int s : e.truth->states) states.push_back(s + 1);
    j["truth"] = {{"states", states}, {"sojourns", e.truth->sojourns}};
  }
  return j;
}

Episode episode_from_json(const json& j, int n_states, int n_streams) {
  Episode e;
  try {
    if (!j.is_object()) throw Error(ErrorKind::MalformedInput, "episode must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      static const std::vector<std::string> keys{"id", "times", "values", "censor_time", "label", "truth"};
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
        throw Error(ErrorKind::MalformedInput, "episode: unknown key '" + it.key() + "'");
    }
    e.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    e.times = j.at("times").get<std::vector<double>>();
    const json& vals = j.at("values");
    if (!vals.is_array() || vals.size() != e.times.size()) bad(e.id, "values must have one row per time");
    e.values.resize(static_cast<long>(e.times.size()), n_streams);
    for (std::size_t r = 0; r < vals.size(); ++r) {
      if (!vals[r].is_array() || static_cast<int>(vals[r].size()) != n_streams)
        bad(e.id, "each values row must have Q entries");
      for (int c = 0; c < n_streams; ++c) {
        const json& v = vals[r][c];
        if (v.is_null()) e.values(static_cast<long>(r), c) = std::numeric_limits<double>::quiet_NaN();
        else if (v.is_number()) e.values(static_cast<long>(r), c) = v.get<double>();
        else bad(e.id, "values entries must be numbers or null");
      }
    }
    e.censor_time = j.at("censor_time").get<double>();
    const int label = j.at("label").get<int>();
    if (label != 1 && label != n_states) bad(e.id, "label must be 1 or N");
    e.label = label - 1;
    if (j.contains("truth") && !j["truth"].is_null()) {
      Trajectory t;
      for (int s : j["truth"].at("states").get<std::vector<int>>()) {
        if (s < 1 || s > n_states) bad(e.id, "truth state out of range");
        t.states.push_back(s - 1);
      }
      t.sojourns = j["truth"].at("sojourns").get<std::vector<double>>();
      if (t.sojourns.size() != t.states.size()) bad(e.id, "truth states and sojourns differ in length");
      e.truth = std::move(t);
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::MalformedInput, "episode '" + e.id + "': " + ex.what());
  }
  return e;
}

std::vector<Episode> read_episodes(const std::string& path, int n_states, int n_streams) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open episode file " + path);
  std::vector<Episode> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::MalformedInput, path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    out.push_back(episode_from_json(j, n_states, n_streams));
  }
  return out;
}

EpisodeFileShape probe_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open episode file " + path);
  EpisodeFileShape shape;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      shape.max_label = std::max(shape.max_label, j.at("label").get<int>());
      const auto& vals = j.at("values");
      if (shape.n_streams == 0 && vals.is_array() && !vals.empty() && vals[0].is_array())
        shape.n_streams = static_cast<int>(vals[0].size());
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::MalformedInput, path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    ++shape.episodes;
  }
  require(shape.episodes > 0, ErrorKind::MalformedInput, "episode file " + path + " is empty");
  require(shape.n_streams > 0, ErrorKind::MalformedInput, "episode file " + path + " has no observations");
  return shape;
}

std::vector<Episode> retarget_labels(const std::vector<Episode>& episodes, int n_states) {
  std::vector<Episode> out = episodes;
  for (auto& e : out) {
    if (e.label != 0) e.label = n_states - 1;
    e.truth.reset();
  }
  return out;
}

void write_episodes(const std::vector<Episode>& episodes, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  for (const auto& e : episodes) out << episode_to_json(e).dump() << "\n";
}

}  // namespace hasmm
