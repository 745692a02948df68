#include "gimlab/degrade.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "gimlab/rng.hpp"

namespace gimlab::degrade {

namespace {
const char* op_name(Op op) {
  switch (op) {
    case Op::None: return "none";
    case Op::Jpeg: return "jpeg";
    case Op::Blur: return "blur";
    case Op::Downsample: return "downsample";
  }
  return "none";
}
}  // namespace

std::string DegradationRecord::serialize() const {
  char buf[96];
  if (op == Op::Jpeg || op == Op::Blur)
    std::snprintf(buf, sizeof(buf), "%s:%d:%llu", op_name(op), static_cast<int>(param),
                  static_cast<unsigned long long>(seed));
  else
    std::snprintf(buf, sizeof(buf), "%s:%g:%llu", op_name(op), param,
                  static_cast<unsigned long long>(seed));
  return buf;
}

DegradationRecord DegradationRecord::parse(const std::string& s) {
  DegradationRecord rec;
  size_t p1 = s.find(':');
  size_t p2 = s.find(':', p1 == std::string::npos ? p1 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos)
    throw std::invalid_argument("DegradationRecord: malformed record " + s);
  std::string name = s.substr(0, p1);
  if (name == "none") rec.op = Op::None;
  else if (name == "jpeg") rec.op = Op::Jpeg;
  else if (name == "blur") rec.op = Op::Blur;
  else if (name == "downsample") rec.op = Op::Downsample;
  else throw std::invalid_argument("DegradationRecord: unknown op " + name);
  rec.param = std::stod(s.substr(p1 + 1, p2 - p1 - 1));
  rec.seed = std::stoull(s.substr(p2 + 1));
  return rec;
}

Image jpeg_compress(const Image& img, int quality) {
  check(quality >= 1 && quality <= 100, "jpeg_compress: quality out of [1,100]");
  check(img.c == 3, "jpeg_compress: 3-channel input required");
  ImageU8 u8 = to_u8(img);
  std::vector<uint8_t> bytes = jpeg_encode(u8, quality);
  ImageU8 back = jpeg_decode(bytes.data(), bytes.size());
  return from_u8(back);
}

Image gaussian_blur(const Image& img, int kernel_size) {
  check(kernel_size >= 1 && (kernel_size % 2) == 1, "gaussian_blur: kernel size must be odd");
  if (kernel_size == 1) return img;
  return gaussian_blur_image(img, kernel_size, blur_sigma(kernel_size));
}

Image downsample(const Image& img, double factor) {
  check(factor > 0.0 && factor <= 1.0, "downsample: factor must be in (0,1]");
  int dh = static_cast<int>(std::floor(factor * img.h));
  int dw = static_cast<int>(std::floor(factor * img.w));
  check(dh >= 1 && dw >= 1, "downsample: factor too small for image");
  if (dh == img.h && dw == img.w) return img;
  Image small = bilinear_resize(img, dh, dw);
  return bilinear_resize(small, img.h, img.w);
}

Image apply(const Image& img, const DegradationRecord& rec) {
  switch (rec.op) {
    case Op::None: return img;
    case Op::Jpeg: return jpeg_compress(img, static_cast<int>(rec.param));
    case Op::Blur: return gaussian_blur(img, static_cast<int>(rec.param));
    case Op::Downsample: return downsample(img, rec.param);
  }
  return img;
}

std::pair<Image, DegradationRecord> random_degrade(const Image& img, uint64_t rng_seed) {
  // one flat cell grid so every (op, param) pair is equally likely
  struct Cell {
    Op op;
    double param;
  };
  static const std::vector<Cell> cells = [] {
    std::vector<Cell> c;
    for (int q : kJpegQualities) c.push_back({Op::Jpeg, static_cast<double>(q)});
    for (int k : kBlurKernels) c.push_back({Op::Blur, static_cast<double>(k)});
    for (double f : kDownsampleFactors) c.push_back({Op::Downsample, f});
    return c;
  }();
  Rng rng(rng_seed);
  const Cell& cell = cells[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(cells.size()) - 1))];
  DegradationRecord rec{cell.op, cell.param, rng_seed};
  return {apply(img, rec), rec};
}

}  // namespace gimlab::degrade
