#pragma once

#include <complex>
#include <span>

#include "spt/tensor.hpp"

namespace spt {

bool is_pow2(std::size_t n);
std::size_t next_pow2(std::size_t n);

// Iterative radix-2 transform with bit-reversal permutation. Forward uses
// e^{-2πi kn/L}; the inverse includes the 1/L factor. Throws LengthError
// unless x.size() is a power of two.
void fft_inplace(std::span<std::complex<double>> x, bool inverse = false);

struct ComplexTensor {
    Tensor re;
    Tensor im;
};

// Differentiable DFT over 1-D real/imag pairs.
ComplexTensor fft(const ComplexTensor& x);
ComplexTensor ifft(const ComplexTensor& x);

// y_n = Σ_{l=0..n} k_l u_{n-l} for 1-D u, k of equal length, via a
// zero-padded FFT of length ≥ 2L.
Tensor conv_causal(const Tensor& u, const Tensor& k);

// Channel-wise causal convolution: u[B, L, H] with kernels k[H, L].
Tensor causal_conv(const Tensor& u, const Tensor& k);

}  // namespace spt
