#include "hasmm/fft.hpp"

#include <cstring>
#include <mutex>

#include <fftw3.h>

#include "hasmm/error.hpp"

namespace hasmm {

namespace {

// FFTW's planner is not thread-safe. FFTW_ESTIMATE keeps the chosen algorithm, and therefore the
// rounding, identical from run to run.
std::mutex& planner_mutex() {
  static std::mutex mu;
  return mu;
}

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

Convolver::Convolver(int length) : length_(length), padded_(next_pow2(std::max(1, 2 * length - 1))) {
  require(length > 0, ErrorKind::Numerical, "convolution length must be positive");
  std::lock_guard<std::mutex> lock(planner_mutex());
  double* in = fftw_alloc_real(padded_);
  fftw_complex* out = fftw_alloc_complex(padded_ / 2 + 1);
  forward_ = fftw_plan_dft_r2c_1d(padded_, in, out, FFTW_ESTIMATE);
  backward_ = fftw_plan_dft_c2r_1d(padded_, out, in, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
}

Convolver::~Convolver() {
  std::lock_guard<std::mutex> lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(forward_));
  fftw_destroy_plan(static_cast<fftw_plan>(backward_));
}

Convolver::Spectrum Convolver::transform(const double* x) const {
  double* in = fftw_alloc_real(padded_);
  fftw_complex* out = fftw_alloc_complex(padded_ / 2 + 1);
  std::memcpy(in, x, sizeof(double) * length_);
  std::memset(in + length_, 0, sizeof(double) * (padded_ - length_));
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_), in, out);
  Spectrum s(padded_ / 2 + 1);
  for (int k = 0; k < padded_ / 2 + 1; ++k) s[k] = {out[k][0], out[k][1]};
  fftw_free(in);
  fftw_free(out);
  return s;
}

void Convolver::inverse(const Spectrum& s, double* result) const {
  double* out = fftw_alloc_real(padded_);
  fftw_complex* in = fftw_alloc_complex(padded_ / 2 + 1);
  for (int k = 0; k < padded_ / 2 + 1; ++k) {
    in[k][0] = s[k].real();
    in[k][1] = s[k].imag();
  }
  fftw_execute_dft_c2r(static_cast<fftw_plan>(backward_), in, out);
  const double scale = 1.0 / padded_;
  for (int k = 0; k < length_; ++k) result[k] = out[k] * scale;
  fftw_free(in);
  fftw_free(out);
}

std::vector<double> Convolver::convolve(const std::vector<double>& a, const std::vector<double>& b) const {
  require(static_cast<int>(a.size()) == length_ && static_cast<int>(b.size()) == length_, ErrorKind::Numerical,
          "convolution inputs must match the planned length");
  Spectrum sa = transform(a.data());
  const Spectrum sb = transform(b.data());
  for (std::size_t k = 0; k < sa.size(); ++k) sa[k] *= sb[k];
  std::vector<double> out(length_);
  inverse(sa, out.data());
  return out;
}

}  // namespace hasmm
