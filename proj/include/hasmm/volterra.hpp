#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hasmm/model.hpp"

namespace hasmm {

// Grid of the interval transition table. Indices run over 0..A, 0..B, 0..C inclusive:
// tau = a*d_tau, elapsed lower bound = b*d_lo, elapsed upper bound = c*d_hi.
struct TableGrid {
  double d_tau = 1.0;
  double d_lo = 1.0;
  double d_hi = 1.0;
  int A = 0;
  int B = 0;
  int C = 0;
};

struct VolterraOptions {
  double epsilon = 1e-6;
  int max_iter = 200;
  double kernel_step = 0.0;  // 0 picks an eighth of the finest grid step
  int threads = 1;
};

struct GridIndex {
  int a = 0;
  int b = 0;
  int c = 0;
  bool saturated = false;
};

// P(X(t+tau) = j | X(t) = i, elapsed time in i at t within [lo, hi]) on a grid, plus the
// probability of still being in the same visit of i.
class TransitionTable {
 public:
  TransitionTable() = default;
  TransitionTable(int n_states, const TableGrid& grid);

  int n_states() const { return n_; }
  const TableGrid& grid() const { return grid_; }

  double at(int i, int j, int a, int b, int c) const { return data_[index(i, j, a, b, c)]; }
  double& at(int i, int j, int a, int b, int c) { return data_[index(i, j, a, b, c)]; }
  double stay(int i, int a, int b, int c) const { return stay_[stay_index(i, a, b, c)]; }
  double& stay(int i, int a, int b, int c) { return stay_[stay_index(i, a, b, c)]; }

  // Nearest grid point per axis, ties to the lower index; out-of-range inputs clamp and flag.
  GridIndex locate(double tau, double lo, double hi) const;
  double query(int i, int j, double tau, double lo, double hi, bool* saturated = nullptr) const;
  // Multilinear interpolation between grid points, clamped at the edges. `saturated` reports
  // whether tau or the lower elapsed bound fell beyond the grid.
  double interpolate(int i, int j, double tau, double lo, double hi, bool* saturated = nullptr) const;
  double interpolate_stay(int i, double tau, double lo, double hi) const;
  Eigen::MatrixXd matrix(int a, int b, int c) const;

  std::uint64_t fingerprint = 0;
  int iterations = 0;
  std::vector<double> residual_trace;

  void save(const std::string& path) const;
  // Verifies the stored fingerprint against `expected` when given.
  static TransitionTable load(const std::string& path, const ParameterSet* expected = nullptr);

 private:
  std::size_t index(int i, int j, int a, int b, int c) const {
    return ((((static_cast<std::size_t>(i) * n_ + j) * (grid_.B + 1) + b) * (grid_.C + 1) + c) * (grid_.A + 1)) + a;
  }
  std::size_t stay_index(int i, int a, int b, int c) const {
    return (((static_cast<std::size_t>(i) * (grid_.B + 1) + b) * (grid_.C + 1) + c) * (grid_.A + 1)) + a;
  }

  int n_ = 0;
  TableGrid grid_;
  std::vector<double> data_;
  std::vector<double> stay_;
};

std::uint64_t table_fingerprint(const ParameterSet& p, const TableGrid& grid);

// Solves the renewal equation for the unconditioned slice by successive approximation, then
// evaluates every conditioned slice against it.
TransitionTable build_table(const ParameterSet& p, const TableGrid& grid, const VolterraOptions& opt = {});

// Unconditioned slice only: result[i*N + j][a].
std::vector<std::vector<double>> solve_unconditioned(const ParameterSet& p, double d_tau, int A,
                                                     const VolterraOptions& opt = {});

// Max |P - F(P)| over the table, F being one application of the discretized equation.
double fixed_point_residual(const TransitionTable& t, const ParameterSet& p, const VolterraOptions& opt = {});

// Column N of the unconditioned slice at the largest tau. Throws when the last ten grid
// points still move by more than `plateau_tol`.
Eigen::VectorXd absorption_row(const TransitionTable& t, double plateau_tol = 1e-3);

// Grid with step dt, elapsed axes covering the 99% sojourn quantile of transient states and a
// tau axis long enough for absorption probabilities to plateau.
TableGrid default_grid(const ParameterSet& p, double dt = 1.0, const VolterraOptions& opt = {});

}  // namespace hasmm
