#include "core/fft.h"

#include <cmath>

#include "core/error.h"

namespace svcforge {

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  require(n > 0 && (n & (n - 1)) == 0, ErrorCode::kContract,
          "fft size must be a power of two");
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

std::vector<std::complex<double>> rfft(const double* x, int count, int n) {
  std::vector<std::complex<double>> a(n, {0.0, 0.0});
  const int m = count < n ? count : n;
  for (int i = 0; i < m; ++i) a[i] = {x[i], 0.0};
  fft_inplace(a, false);
  a.resize(n / 2 + 1);
  return a;
}

std::vector<double> irfft(const std::vector<std::complex<double>>& bins, int n) {
  require(static_cast<int>(bins.size()) == n / 2 + 1, ErrorCode::kContract,
          "irfft bin count mismatch");
  std::vector<std::complex<double>> a(n);
  for (int k = 0; k <= n / 2; ++k) a[k] = bins[k];
  for (int k = n / 2 + 1; k < n; ++k) a[k] = std::conj(bins[n - k]);
  fft_inplace(a, true);
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = a[i].real();
  return out;
}

}  // namespace svcforge
