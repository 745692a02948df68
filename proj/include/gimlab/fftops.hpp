#pragma once

#include <complex>

namespace gimlab {

/// In-place 2D DFT on an h*w row-major complex buffer. inverse applies the
/// 1/(h*w) normalization so fft2(fft2(x), inverse=true) == x.
void fft2(int h, int w, std::complex<double>* data, bool inverse);

}  // namespace gimlab
