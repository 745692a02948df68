#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gimlab/tensor.hpp"

namespace gimlab {

/// Row-major HWC image with values in [0,1]. c is 1 or 3.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

  double& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
  size_t size() const { return data.size(); }
};

/// 8-bit image used for storage and caching.
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> data;
};

ImageU8 to_u8(const Image& img);
Image from_u8(const ImageU8& img);

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

/// Baseline JPEG (libjpeg), 4:2:0 chroma subsampling at the codec default.
std::vector<uint8_t> jpeg_encode(const ImageU8& img, int quality);
ImageU8 jpeg_decode(const uint8_t* bytes, size_t len);
void write_jpeg(const std::string& path, const ImageU8& img, int quality);
ImageU8 read_jpeg(const std::string& path);

/// Reads PNG or JPEG based on file magic.
ImageU8 read_image(const std::string& path);

// ---- processing primitives shared by degradation, generation and the model ----

void clip01(Image& img);

/// Separable Gaussian blur with replicate padding. sigma <= 0 is identity.
Image gaussian_blur_image(const Image& img, int kernel_size, double sigma);

/// Normalized 1D Gaussian kernel of odd length k.
std::vector<double> gaussian_kernel(int k, double sigma);

/// Bilinear resize (half-pixel centers, align_corners=false).
Image bilinear_resize(const Image& img, int out_h, int out_w);

/// Box mean with replicate padding (odd k).
Image box_blur(const Image& img, int k);

Image channel_mean(const Image& img);  // HxWxC -> HxWx1

Tensor image_to_chw(const Image& img);           // -> [C,H,W]
Image chw_to_image(const Tensor& t);             // [C,H,W] ->

}  // namespace gimlab
