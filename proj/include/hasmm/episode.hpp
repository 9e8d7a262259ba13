#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hasmm/model.hpp"

namespace hasmm {

// Hidden path of one episode: 0-based states and their sojourn lengths.
struct Trajectory {
  std::vector<int> states;
  std::vector<double> sojourns;

  double total() const;
  // Entry time of visit k.
  double entry_time(std::size_t k) const;
};

struct Episode {
  std::string id;
  std::vector<double> times;
  Eigen::MatrixXd values;  // M x Q, NaN for missing
  double censor_time = 0.0;
  int label = 0;  // 0-based absorbing state
  std::optional<Trajectory> truth;

  int size() const { return static_cast<int>(times.size()); }
};

// Index of the first observation at or after t (observations are sorted).
int first_at_or_after(const std::vector<double>& times, double t);
// Index of the first observation strictly after t.
int first_after(const std::vector<double>& times, double t);

void validate(const Episode& e, const ParameterSet& p);

json episode_to_json(const Episode& e);
Episode episode_from_json(const json& j, int n_states, int n_streams);

std::vector<Episode> read_episodes(const std::string& path, int n_states, int n_streams);
void write_episodes(const std::vector<Episode>& episodes, const std::string& path);

// Stream count and largest label (1-based) found in an episode file, for reading data whose
// state count is not known yet.
struct EpisodeFileShape {
  int n_streams = 0;
  int max_label = 1;
  int episodes = 0;
};
EpisodeFileShape probe_episodes(const std::string& path);

// Same episodes for a model with n_states states: catastrophic labels move to n_states-1 and
// hidden paths are dropped.
std::vector<Episode> retarget_labels(const std::vector<Episode>& episodes, int n_states);

}  // namespace hasmm
