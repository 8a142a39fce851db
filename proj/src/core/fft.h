#pragma once

#include <complex>
#include <vector>

namespace svcforge {

// In-place radix-2 FFT. Size must be a power of two. The inverse transform
// includes the 1/n scaling.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

// Real-input FFT returning bins 0..n/2 (n power of two, x zero-padded or
// truncated to n).
std::vector<std::complex<double>> rfft(const double* x, int count, int n);

// Inverse of rfft for a Hermitian-symmetric spectrum given as bins 0..n/2.
std::vector<double> irfft(const std::vector<std::complex<double>>& bins, int n);

}  // namespace svcforge
