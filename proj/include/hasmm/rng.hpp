#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <boost/random/exponential_distribution.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace hasmm {

using Engine = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-seeds from a master seed.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return mix64(mix64(master ^ mix64(stream)) + index);
}

// Thin wrapper so every draw goes through distributions with a fixed algorithm.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    boost::random::uniform_01<double> d;
    double u = d(engine_);
    return u;
  }
  // Uniform on the open interval (0, 1).
  double uniform_open() {
    double u;
    do { u = uniform(); } while (u <= 0.0);
    return u;
  }
  double normal() { return boost::random::normal_distribution<double>(0.0, 1.0)(engine_); }
  double exponential(double rate) { return boost::random::exponential_distribution<double>(rate)(engine_); }
  // Gamma with shape-rate parameterization.
  double gamma(double shape, double rate) {
    return boost::random::gamma_distribution<double>(shape, 1.0)(engine_) / rate;
  }
  // Index drawn proportionally to non-negative weights; returns -1 when all weights vanish.
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) return -1;
    double u = uniform() * total;
    double acc = 0.0;
    int last = -1;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      if (weights[k] <= 0.0) continue;
      acc += weights[k];
      last = static_cast<int>(k);
      if (u < acc) return last;
    }
    return last;
  }
  bool bernoulli(double p) { return uniform() < p; }

  Engine& engine() { return engine_; }

 private:
  Engine engine_;
};

}  // namespace hasmm
