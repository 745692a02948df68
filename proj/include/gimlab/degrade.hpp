#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gimlab/image.hpp"

namespace gimlab::degrade {

enum class Op { None, Jpeg, Blur, Downsample };

/// One applied degradation; param is the quality / kernel size / scale factor.
struct DegradationRecord {
  Op op = Op::None;
  double param = 0.0;
  uint64_t seed = 0;

  std::string serialize() const;  // "op:param:seed"
  static DegradationRecord parse(const std::string& s);
};

// Parameter grid ("Jpeg" quality / "Blur" kernel / "Downsample" factor).
inline const std::vector<int> kJpegQualities = {75, 80, 90};
inline const std::vector<int> kBlurKernels = {3, 5};
inline const std::vector<double> kDownsampleFactors = {0.5, 0.67};

/// Kernel-size to sigma rule used when only a kernel size is given.
inline double blur_sigma(int kernel_size) {
  return 0.3 * ((kernel_size - 1) / 2.0 - 1.0) + 0.8;
}

/// Encode-decode roundtrip through the baseline JPEG codec.
Image jpeg_compress(const Image& img, int quality);

/// Separable Gaussian blur, replicate padding, sigma from blur_sigma().
Image gaussian_blur(const Image& img, int kernel_size);

/// Bilinear resize down by `factor` and back up, so shapes are preserved.
Image downsample(const Image& img, double factor);

Image apply(const Image& img, const DegradationRecord& rec);

/// Picks one (op, param) cell uniformly from the grid and applies it.
std::pair<Image, DegradationRecord> random_degrade(const Image& img, uint64_t rng_seed);

}  // namespace gimlab::degrade
