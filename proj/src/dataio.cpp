#include "gimlab/dataio.hpp"

#include <algorithm>
#include <filesystem>

namespace fs = std::filesystem;

namespace gimlab::data {

const ImageU8& ImageCache::get(const std::string& rel_path) {
  auto it = cache_.find(rel_path);
  if (it != cache_.end()) return it->second;
  ImageU8 img = read_image((fs::path(root_) / rel_path).string());
  return cache_.emplace(rel_path, std::move(img)).first->second;
}

Tensor load_input_chw(ImageCache& cache, const synth::ManifestEntry& e) {
  return image_to_chw(from_u8(cache.get(e.image_path)));
}

Tensor load_trace_target(ImageCache& cache, const synth::ManifestEntry& e) {
  if (e.label == 0) {
    const ImageU8& img = cache.get(e.image_path);
    return Tensor::zeros({1, img.h, img.w});
  }
  const ImageU8& clean = cache.get(synth::clean_path_for(e));
  const ImageU8& orig = cache.get(synth::original_path_for(e));
  check(clean.h == orig.h && clean.w == orig.w, "trace target: size mismatch");
  Tensor t({1, clean.h, clean.w});
  for (int64_t i = 0; i < static_cast<int64_t>(t.data.size()); ++i) {
    double acc = 0.0;
    for (int ch = 0; ch < 3; ++ch)
      acc += (clean.data[static_cast<size_t>(i * 3 + ch)] -
              static_cast<double>(orig.data[static_cast<size_t>(i * 3 + ch)])) / 255.0;
    t[i] = acc / 3.0;
  }
  return t;
}

Tensor load_mask(ImageCache& cache, const synth::ManifestEntry& e, int h, int w) {
  if (e.label == 0 || e.mask_path == "-") return Tensor::zeros({h, w});
  const ImageU8& m = cache.get(e.mask_path);
  check(m.h == h && m.w == w && m.c == 1, "mask: unexpected geometry");
  Tensor t({h, w});
  for (int64_t i = 0; i < static_cast<int64_t>(t.data.size()); ++i)
    t[i] = m.data[static_cast<size_t>(i)] >= 128 ? 1.0 : 0.0;
  return t;
}

Tensor resize_chw(const Tensor& t, int64_t oh, int64_t ow) {
  check(t.ndim() == 3, "resize_chw: expected [C,H,W]");
  Image img = chw_to_image(t);
  return image_to_chw(bilinear_resize(img, static_cast<int>(oh), static_cast<int>(ow)));
}

Tensor hflip_chw(const Tensor& t) {
  check(t.ndim() == 3, "hflip_chw: expected [C,H,W]");
  int64_t C = t.shape[0], H = t.shape[1], W = t.shape[2];
  Tensor out(t.shape);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        out[(c * H + y) * W + x] = t[(c * H + y) * W + (W - 1 - x)];
  return out;
}

Tensor crop_or_pad_chw(const Tensor& t, int64_t size, int64_t y0, int64_t x0) {
  check(t.ndim() == 3, "crop_or_pad_chw: expected [C,H,W]");
  int64_t C = t.shape[0], H = t.shape[1], W = t.shape[2];
  Tensor out({C, size, size});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        int64_t sy = std::clamp<int64_t>(y0 + y, 0, H - 1);
        int64_t sx = std::clamp<int64_t>(x0 + x, 0, W - 1);
        out[(c * size + y) * size + x] = t[(c * H + sy) * W + sx];
      }
  return out;
}

}  // namespace gimlab::data
