#include "gimlab/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace gimlab {

ImageU8 to_u8(const Image& img) {
  ImageU8 out;
  out.h = img.h;
  out.w = img.w;
  out.c = img.c;
  out.data.resize(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    double v = img.data[i];
    v = std::min(1.0, std::max(0.0, v));
    out.data[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

Image from_u8(const ImageU8& img) {
  Image out(img.h, img.w, img.c);
  for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = img.data[i] / 255.0;
  return out;
}

// ---------------------------------------------------------------- PNG

void write_png(const std::string& path, const ImageU8& img) {
  check(img.c == 1 || img.c == 3, "write_png: channels must be 1 or 3");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure on " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(img.data.data() + static_cast<size_t>(y) * img.w * img.c);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ImageU8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng failure on " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int channels = png_get_channels(png, info);
  check(channels == 1 || channels == 3, "read_png: unsupported channel count");

  ImageU8 out;
  out.h = static_cast<int>(h);
  out.w = static_cast<int>(w);
  out.c = channels;
  out.data.resize(static_cast<size_t>(h) * w * channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = out.data.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

// ---------------------------------------------------------------- JPEG

namespace {
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jmp;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jmp, 1);
}
}  // namespace

std::vector<uint8_t> jpeg_encode(const ImageU8& img, int quality) {
  check(img.c == 3, "jpeg_encode: 3-channel input required");
  check(quality >= 1 && quality <= 100, "jpeg_encode: quality out of [1,100]");
  jpeg_compress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  unsigned char* buf = nullptr;
  unsigned long buflen = 0;
  if (setjmp(jerr.jmp)) {
    jpeg_destroy_compress(&cinfo);
    if (buf) free(buf);
    throw std::runtime_error("jpeg_encode: codec failure");
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buf, &buflen);
  cinfo.image_width = static_cast<JDIMENSION>(img.w);
  cinfo.image_height = static_cast<JDIMENSION>(img.h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(img.data.data() + static_cast<size_t>(cinfo.next_scanline) * img.w * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<uint8_t> out(buf, buf + buflen);
  free(buf);
  return out;
}

ImageU8 jpeg_decode(const uint8_t* bytes, size_t len) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jmp)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("jpeg_decode: codec failure");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, const_cast<unsigned char*>(bytes), static_cast<unsigned long>(len));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  ImageU8 out;
  out.h = static_cast<int>(cinfo.output_height);
  out.w = static_cast<int>(cinfo.output_width);
  out.c = 3;
  out.data.resize(static_cast<size_t>(out.h) * out.w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.data.data() + static_cast<size_t>(cinfo.output_scanline) * out.w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

void write_jpeg(const std::string& path, const ImageU8& img, int quality) {
  std::vector<uint8_t> bytes = jpeg_encode(img, quality);
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_jpeg: cannot open " + path);
  size_t n = std::fwrite(bytes.data(), 1, bytes.size(), fp);
  std::fclose(fp);
  if (n != bytes.size()) throw std::runtime_error("write_jpeg: short write on " + path);
}

ImageU8 read_jpeg(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_jpeg: cannot open " + path);
  std::fseek(fp, 0, SEEK_END);
  long len = std::ftell(fp);
  std::fseek(fp, 0, SEEK_SET);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  size_t n = std::fread(bytes.data(), 1, bytes.size(), fp);
  std::fclose(fp);
  if (n != bytes.size()) throw std::runtime_error("read_jpeg: short read on " + path);
  return jpeg_decode(bytes.data(), bytes.size());
}

ImageU8 read_image(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_image: cannot open " + path);
  unsigned char magic[2] = {0, 0};
  size_t n = std::fread(magic, 1, 2, fp);
  std::fclose(fp);
  if (n == 2 && magic[0] == 0x89 && magic[1] == 'P') return read_png(path);
  return read_jpeg(path);
}

// ---------------------------------------------------------------- processing

void clip01(Image& img) {
  for (auto& v : img.data) v = std::min(1.0, std::max(0.0, v));
}

std::vector<double> gaussian_kernel(int k, double sigma) {
  check(k >= 1 && (k % 2) == 1, "gaussian_kernel: kernel size must be odd and >= 1");
  std::vector<double> w(static_cast<size_t>(k), 1.0);
  if (k == 1 || sigma <= 0.0) {
    w.assign(static_cast<size_t>(k), 0.0);
    w[static_cast<size_t>(k / 2)] = 1.0;
    return w;
  }
  int r = k / 2;
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    w[static_cast<size_t>(i + r)] = v;
    sum += v;
  }
  for (auto& v : w) v /= sum;
  return w;
}

namespace {
inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }
}  // namespace

Image gaussian_blur_image(const Image& img, int kernel_size, double sigma) {
  std::vector<double> w = gaussian_kernel(kernel_size, sigma);
  int r = kernel_size / 2;
  Image tmp(img.h, img.w, img.c), out(img.h, img.w, img.c);
  // horizontal
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += w[static_cast<size_t>(i + r)] * img.at(y, clampi(x + i, 0, img.w - 1), ch);
        tmp.at(y, x, ch) = acc;
      }
  // vertical
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += w[static_cast<size_t>(i + r)] * tmp.at(clampi(y + i, 0, img.h - 1), x, ch);
        out.at(y, x, ch) = acc;
      }
  return out;
}

Image bilinear_resize(const Image& img, int out_h, int out_w) {
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be positive");
  if (out_h == img.h && out_w == img.w) return img;
  Image out(out_h, out_w, img.c);
  double sy = static_cast<double>(img.h) / out_h;
  double sx = static_cast<double>(img.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = clampi(y0, 0, img.h - 1), y1c = clampi(y0 + 1, 0, img.h - 1);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = clampi(x0, 0, img.w - 1), x1c = clampi(x0 + 1, 0, img.w - 1);
      for (int ch = 0; ch < img.c; ++ch) {
        double v00 = img.at(y0c, x0c, ch), v01 = img.at(y0c, x1c, ch);
        double v10 = img.at(y1c, x0c, ch), v11 = img.at(y1c, x1c, ch);
        out.at(y, x, ch) = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

Image box_blur(const Image& img, int k) {
  check(k >= 1 && (k % 2) == 1, "box_blur: kernel size must be odd");
  int r = k / 2;
  Image tmp(img.h, img.w, img.c), out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += img.at(y, clampi(x + i, 0, img.w - 1), ch);
        tmp.at(y, x, ch) = acc / k;
      }
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += tmp.at(clampi(y + i, 0, img.h - 1), x, ch);
        out.at(y, x, ch) = acc / k;
      }
  return out;
}

Image channel_mean(const Image& img) {
  Image out(img.h, img.w, 1);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int ch = 0; ch < img.c; ++ch) acc += img.at(y, x, ch);
      out.at(y, x, 0) = acc / img.c;
    }
  return out;
}

Tensor image_to_chw(const Image& img) {
  Tensor t({img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t[(static_cast<int64_t>(ch) * img.h + y) * img.w + x] = img.at(y, x, ch);
  return t;
}

Image chw_to_image(const Tensor& t) {
  check(t.ndim() == 3, "chw_to_image: expected [C,H,W]");
  Image img(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]), static_cast<int>(t.shape[0]));
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        img.at(y, x, ch) = t[(static_cast<int64_t>(ch) * img.h + y) * img.w + x];
  return img;
}

}  // namespace gimlab
