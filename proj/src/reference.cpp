#include "hasmm/reference.hpp"

namespace hasmm {

namespace {

GpHyper gp(std::initializer_list<double> mean, double sigma, double ell, double corr, double jitter) {
  GpHyper g;
  g.mean = Eigen::Map<const Eigen::VectorXd>(mean.begin(), static_cast<Eigen::Index>(mean.size()));
  g.sigma = sigma;
  g.length_scale = ell;
  const int q = g.n_streams();
  g.task_cov = Eigen::MatrixXd::Constant(q, q, corr);
  g.task_cov.diagonal().setOnes();
  g.jitter = jitter;
  return g;
}

}  // namespace

ParameterSet reference_params() {
  ParameterSet p;
  p.n_states = 3;
  p.sojourn = {{2.0, 0.2}, {3.0, 0.25}, {2.0, 0.25}};
  p.initial = Eigen::Vector3d(0.0, 1.0, 0.0);
  p.eta = Eigen::MatrixXd::Zero(3, 3);
  p.beta = Eigen::MatrixXd::Zero(3, 3);
  p.eta(1, 2) = -0.5;
  p.beta(1, 2) = 0.05;
  p.emission = {gp({2.0, 5.0}, 0.7, 2.0, 0.3, 0.049), gp({4.5, 2.5}, 0.7, 2.0, 0.3, 0.049),
                gp({7.0, -2.5}, 0.7, 2.0, 0.3, 0.049)};
  p.zeta = 0.5;
  return p;
}

ParameterSet toy_params() {
  ParameterSet p;
  p.n_states = 4;
  p.sojourn = {{1.0, 1.0}, {2.0, 0.6}, {1.5, 0.5}, {1.0, 1.0}};
  p.initial = Eigen::Vector4d(0.0, 0.6, 0.4, 0.0);
  p.eta = Eigen::MatrixXd::Zero(4, 4);
  p.beta = Eigen::MatrixXd::Zero(4, 4);
  p.eta(1, 2) = 0.5;
  p.eta(1, 3) = -1.0;
  p.beta(1, 3) = 0.3;
  p.eta(2, 0) = -1.0;
  p.eta(2, 3) = 0.5;
  p.emission = {gp({0.0}, 1.0, 1.5, 0.0, 0.05), gp({1.5}, 1.0, 1.5, 0.0, 0.05), gp({3.0}, 1.0, 1.5, 0.0, 0.05),
                gp({4.5}, 1.0, 1.5, 0.0, 0.05)};
  p.zeta = 0.7;
  return p;
}

ParameterSet ctmc_params(int transient) {
  const int n = transient + 2;
  ParameterSet p;
  p.n_states = n;
  p.sojourn.assign(n, {1.0, 1.0});
  for (int i = 1; i <= transient; ++i) p.sojourn[i].rate = 0.08 + 0.05 * i;
  p.initial = Eigen::VectorXd::Zero(n);
  p.initial.segment(1, transient).setConstant(1.0 / transient);
  p.eta = Eigen::MatrixXd::Zero(n, n);
  p.beta = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i <= transient; ++i)
    for (int j = 0; j < n; ++j)
      if (j != i) p.eta(i, j) = 0.3 * ((i + 2 * j) % 3) - 0.3;
  for (int i = 0; i < n; ++i) p.emission.push_back(gp({1.5 * i}, 1.0, 2.0, 0.0, 0.05));
  p.zeta = 0.5;
  return p;
}

}  // namespace hasmm
