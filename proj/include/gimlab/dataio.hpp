#pragma once

#include <string>
#include <unordered_map>

#include "gimlab/image.hpp"
#include "gimlab/synthgen.hpp"
#include "gimlab/tensor.hpp"

namespace gimlab::data {

/// Decoded-image cache keyed by manifest-relative path.
class ImageCache {
 public:
  explicit ImageCache(std::string root) : root_(std::move(root)) {}
  const ImageU8& get(const std::string& rel_path);
  const std::string& root() const { return root_; }

 private:
  std::string root_;
  std::unordered_map<std::string, ImageU8> cache_;
};

/// Model input image (degraded jpg / png) as [3,H,W] in [0,1].
Tensor load_input_chw(ImageCache& cache, const synth::ManifestEntry& e);

/// Ground-truth 1-channel trace target [1,H,W]: channel mean of
/// (pre-degradation blended - original); all-zero for authentic entries.
Tensor load_trace_target(ImageCache& cache, const synth::ManifestEntry& e);

/// Binary mask [H,W] with values {0,1}; all-zero for authentic entries.
Tensor load_mask(ImageCache& cache, const synth::ManifestEntry& e, int h, int w);

// CHW tensor geometry helpers used by train-time augmentation.
Tensor resize_chw(const Tensor& t, int64_t oh, int64_t ow);  // bilinear
Tensor hflip_chw(const Tensor& t);
/// Crop (top-left anchored at y0,x0) or replicate-pad to size x size.
Tensor crop_or_pad_chw(const Tensor& t, int64_t size, int64_t y0, int64_t x0);

}  // namespace gimlab::data
