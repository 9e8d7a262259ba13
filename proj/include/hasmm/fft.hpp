#pragma once

#include <complex>
#include <vector>

namespace hasmm {

// Linear convolution of equal-length sequences by zero-padded real FFT
// (padding to the next power of two >= 2*length - 1), truncated to `length` points.
class Convolver {
 public:
  using Spectrum = std::vector<std::complex<double>>;

  explicit Convolver(int length);
  ~Convolver();
  Convolver(const Convolver&) = delete;
  Convolver& operator=(const Convolver&) = delete;

  int length() const { return length_; }
  int padded() const { return padded_; }

  Spectrum transform(const double* x) const;
  // Inverse transform of a spectrum product, first `length` points written to out.
  void inverse(const Spectrum& s, double* out) const;

  std::vector<double> convolve(const std::vector<double>& a, const std::vector<double>& b) const;

 private:
  int length_;
  int padded_;
  void* forward_;
  void* backward_;
};

}  // namespace hasmm
