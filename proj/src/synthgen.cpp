#include "gimlab/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "gimlab/fftops.hpp"
#include "gimlab/rng.hpp"

namespace fs = std::filesystem;

namespace gimlab::synth {

namespace {
constexpr int kStorageJpegQuality = 95;  // container quality for non-jpeg degradations
constexpr double kMaxCoverage = 0.6;     // blob generator cannot exceed this
}  // namespace

int64_t BinaryMask::positive_count() const {
  int64_t n = 0;
  for (uint8_t v : pixels) n += v;
  return n;
}

double BinaryMask::coverage() const {
  return static_cast<double>(positive_count()) / (static_cast<double>(h) * w);
}

int BinaryMask::component_count() const {
  std::vector<uint8_t> seen(pixels.size(), 0);
  std::vector<int> stack;
  int comps = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int i = y * w + x;
      if (!pixels[static_cast<size_t>(i)] || seen[static_cast<size_t>(i)]) continue;
      ++comps;
      stack.push_back(i);
      seen[static_cast<size_t>(i)] = 1;
      while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        int cy = cur / w, cx = cur % w;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          int ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          int ni = ny * w + nx;
          if (pixels[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
            seen[static_cast<size_t>(ni)] = 1;
            stack.push_back(ni);
          }
        }
      }
    }
  return comps;
}

const char* family_name(Family f) {
  switch (f) {
    case Family::RepaintNoise: return "repaint-noise";
    case Family::SmoothRemoval: return "smooth-removal";
    case Family::TextureResynth: return "texture-resynth";
  }
  return "?";
}

const char* family_subset_tag(Family f) {
  switch (f) {
    case Family::RepaintNoise: return "SD-like";
    case Family::SmoothRemoval: return "DDNM-like";
    case Family::TextureResynth: return "GLIDE-like";
  }
  return "?";
}

GeneratorSpec GeneratorSpec::defaults(Family f, uint64_t seed) {
  GeneratorSpec s;
  s.family = f;
  s.seed = seed;
  return s;
}

// ------------------------------------------------------------- sources

namespace {

// value noise: random lattice, bilinear interpolation
void add_value_noise(Image& img, Rng& rng, double cell, double amp, int channel_mode) {
  int gh = static_cast<int>(std::ceil(img.h / cell)) + 2;
  int gw = static_cast<int>(std::ceil(img.w / cell)) + 2;
  int nch = channel_mode == 0 ? 1 : img.c;  // 0: shared luma field, 1: per channel
  std::vector<double> grid(static_cast<size_t>(gh) * gw * nch);
  for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double fy = y / cell, fx = x / cell;
      int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      double wy = fy - y0, wx = fx - x0;
      for (int ch = 0; ch < img.c; ++ch) {
        int gc = channel_mode == 0 ? 0 : ch;
        auto g = [&](int yy, int xx) {
          return grid[(static_cast<size_t>(yy) * gw + xx) * nch + gc];
        };
        double v = (1 - wy) * ((1 - wx) * g(y0, x0) + wx * g(y0, x0 + 1)) +
                   wy * ((1 - wx) * g(y0 + 1, x0) + wx * g(y0 + 1, x0 + 1));
        img.at(y, x, ch) += amp * v;
      }
    }
}

void add_soft_shape(Image& img, Rng& rng) {
  double cy = rng.uniform(0.1, 0.9) * img.h;
  double cx = rng.uniform(0.1, 0.9) * img.w;
  double ry = rng.uniform(0.08, 0.3) * img.h;
  double rx = rng.uniform(0.08, 0.3) * img.w;
  double ang = rng.uniform(0.0, 3.14159265);
  double col[3] = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
  double edge = rng.uniform(0.5, 2.5);
  bool rect = rng.bernoulli(0.4);
  double ca = std::cos(ang), sa = std::sin(ang);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double dy = (y - cy), dx = (x - cx);
      double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
      double d = rect ? std::max(std::abs(u), std::abs(v)) : std::sqrt(u * u + v * v);
      double a = 1.0 / (1.0 + std::exp((d - 1.0) * 8.0 * edge));
      if (a < 1e-4) continue;
      for (int ch = 0; ch < img.c; ++ch)
        img.at(y, x, ch) = (1 - a) * img.at(y, x, ch) + a * col[ch];
    }
}

void add_stripes(Image& img, Rng& rng) {
  double freq = rng.uniform(0.15, 0.7);
  double ang = rng.uniform(0.0, 3.14159265);
  double amp = rng.uniform(0.1, 0.3);
  double phase = rng.uniform(0.0, 6.28318);
  bool square = rng.bernoulli(0.5);
  double ca = std::cos(ang), sa = std::sin(ang);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double s = std::sin(freq * (ca * x + sa * y) + phase);
      if (square) s = s > 0 ? 1.0 : -1.0;
      for (int ch = 0; ch < img.c; ++ch) img.at(y, x, ch) += amp * s;
    }
}

}  // namespace

Image make_source_image(int h, int w, uint64_t seed, TexturePool pool) {
  Rng rng(seed);
  Image img(h, w, 3);
  // base color + gradient
  double base[3] = {rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)};
  double gdir = rng.uniform(0.0, 6.28318);
  double gamp = rng.uniform(0.0, 0.25);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gshift = gamp * ((std::cos(gdir) * x + std::sin(gdir) * y) / std::max(h, w) - 0.5);
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = base[ch] + gshift;
    }
  if (pool == TexturePool::Main) {
    // fBm octaves; mixture of shared and per-channel fields
    double cell = rng.uniform(12.0, 28.0);
    double amp = rng.uniform(0.18, 0.3);
    for (int oct = 0; oct < 4 && cell >= 2.0; ++oct) {
      add_value_noise(img, rng, cell, amp, oct == 0 ? 0 : 1);
      cell *= 0.5;
      amp *= rng.uniform(0.45, 0.6);
    }
    int shapes = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < shapes; ++i) add_soft_shape(img, rng);
  } else {
    // held-out pool: stripe/checker dominated with coarser noise
    int stripes = static_cast<int>(rng.uniform_int(1, 2));
    for (int i = 0; i < stripes; ++i) add_stripes(img, rng);
    double cell = rng.uniform(4.0, 10.0);
    add_value_noise(img, rng, cell, rng.uniform(0.1, 0.2), 1);
    if (rng.bernoulli(0.6)) add_soft_shape(img, rng);
  }
  clip01(img);
  return img;
}

Image snap_to_grid(const Image& img, int levels) {
  Image out = img;
  double lv = static_cast<double>(levels);
  for (auto& v : out.data) v = std::round(v * lv) / lv;
  return out;
}

// ------------------------------------------------------------- masks

BinaryMask generate_mask(int height, int width, uint64_t rng_seed,
                         std::pair<double, double> coverage_bounds) {
  check(height >= 64 && width >= 64, "generate_mask: image size must be at least 64x64");
  auto [lo, hi] = coverage_bounds;
  check(lo > 0.0 && hi <= 1.0 && lo <= hi, "generate_mask: malformed coverage bounds");
  if (lo > kMaxCoverage)
    throw std::invalid_argument("generate_mask: coverage bounds infeasible for the blob generator");
  hi = std::min(hi, kMaxCoverage);
  int64_t n = static_cast<int64_t>(height) * width;
  int64_t kmin = static_cast<int64_t>(std::ceil(lo * static_cast<double>(n)));
  int64_t kmax = static_cast<int64_t>(std::floor(hi * static_cast<double>(n)));
  kmin = std::max<int64_t>(kmin, 1);
  if (kmin > kmax)
    throw std::invalid_argument("generate_mask: coverage bounds infeasible for image size");

  Rng rng(rng_seed);
  double target = rng.uniform(lo, hi);
  int64_t k = std::clamp(static_cast<int64_t>(std::llround(target * static_cast<double>(n))),
                         kmin, kmax);

  // low-pass filtered noise field -> smooth organic blobs
  Image field(height, width, 1);
  for (auto& v : field.data) v = rng.normal();
  double sigma = std::min(height, width) / 10.0;
  int ksz = 2 * static_cast<int>(std::ceil(2.0 * sigma)) + 1;
  field = gaussian_blur_image(field, ksz, sigma);

  // take exactly the k largest field values; ties broken by index
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return field.data[static_cast<size_t>(a)] > field.data[static_cast<size_t>(b)];
  });
  BinaryMask mask;
  mask.h = height;
  mask.w = width;
  mask.pixels.assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < k; ++i) mask.pixels[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  return mask;
}

// ------------------------------------------------------------- families

namespace {

Image repaint_noise(const Image& orig, const BinaryMask& mask, const GeneratorSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x5e9a));
  Image local_mean = box_blur(orig, spec.mean_kernel | 1);
  Image noise(orig.h, orig.w, 3);
  for (auto& v : noise.data) v = rng.normal();
  int klow = 2 * static_cast<int>(std::ceil(2 * spec.band_sigma_low)) + 1;
  int khigh = 2 * static_cast<int>(std::ceil(2 * spec.band_sigma_high)) + 1;
  Image lo = gaussian_blur_image(noise, klow, spec.band_sigma_low);
  Image hi = gaussian_blur_image(noise, khigh, spec.band_sigma_high);
  // band-limited field, normalized to unit std
  double var = 0.0;
  for (size_t i = 0; i < noise.data.size(); ++i) {
    lo.data[i] -= hi.data[i];
    var += lo.data[i] * lo.data[i];
  }
  double is = 1.0 / std::sqrt(var / static_cast<double>(noise.data.size()) + 1e-12);
  Image out = orig;
  for (int y = 0; y < orig.h; ++y)
    for (int x = 0; x < orig.w; ++x) {
      if (!mask.at(y, x)) continue;
      for (int ch = 0; ch < 3; ++ch)
        out.at(y, x, ch) = local_mean.at(y, x, ch) + spec.noise_amp * is * lo.at(y, x, ch);
    }
  return out;
}

Image smooth_removal(const Image& orig, const BinaryMask& mask, const GeneratorSpec& spec) {
  // Jacobi diffusion fill with off-mask pixels as the boundary condition
  Image fill = box_blur(orig, 9);
  for (int y = 0; y < orig.h; ++y)
    for (int x = 0; x < orig.w; ++x)
      if (!mask.at(y, x))
        for (int ch = 0; ch < 3; ++ch) fill.at(y, x, ch) = orig.at(y, x, ch);
  Image next = fill;
  auto cl = [](int v, int hi2) { return v < 0 ? 0 : (v >= hi2 ? hi2 - 1 : v); };
  for (int it = 0; it < spec.diffusion_iters; ++it) {
    for (int y = 0; y < orig.h; ++y)
      for (int x = 0; x < orig.w; ++x) {
        if (!mask.at(y, x)) continue;
        for (int ch = 0; ch < 3; ++ch) {
          double s = fill.at(cl(y - 1, orig.h), x, ch) + fill.at(cl(y + 1, orig.h), x, ch) +
                     fill.at(y, cl(x - 1, orig.w), ch) + fill.at(y, cl(x + 1, orig.w), ch);
          next.at(y, x, ch) = 0.25 * s;
        }
      }
    std::swap(fill, next);
  }
  Image smooth = gaussian_blur_image(fill, spec.smooth_kernel | 1, 1.4);
  Image out = orig;
  for (int y = 0; y < orig.h; ++y)
    for (int x = 0; x < orig.w; ++x)
      if (mask.at(y, x))
        for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = smooth.at(y, x, ch);
  return out;
}

Image texture_resynth(const Image& orig, const BinaryMask& mask, const GeneratorSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x7e51));
  int p = std::max(3, spec.patch | 1);
  int r = p / 2;
  Image acc(orig.h, orig.w, 3);
  Image wsum(orig.h, orig.w, 1);
  int stride = std::max(1, p - 2);
  // off-mask source centers
  std::vector<std::pair<int, int>> sources;
  for (int y = r; y < orig.h - r; ++y)
    for (int x = r; x < orig.w - r; ++x)
      if (!mask.at(y, x)) sources.emplace_back(y, x);
  if (sources.empty()) sources.emplace_back(r, r);
  for (int cy = 0; cy < orig.h; cy += stride)
    for (int cx = 0; cx < orig.w; cx += stride) {
      auto [sy, sx] = sources[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(sources.size()) - 1))];
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          int ty = cy + dy, tx = cx + dx;
          if (ty < 0 || ty >= orig.h || tx < 0 || tx >= orig.w) continue;
          double wt = (1.0 - std::abs(dy) / (r + 1.0)) * (1.0 - std::abs(dx) / (r + 1.0)) + 1e-6;
          int qy = std::clamp(sy + dy, 0, orig.h - 1);
          int qx = std::clamp(sx + dx, 0, orig.w - 1);
          for (int ch = 0; ch < 3; ++ch) acc.at(ty, tx, ch) += wt * orig.at(qy, qx, ch);
          wsum.at(ty, tx, 0) += wt;
        }
    }
  Image out = orig;
  for (int y = 0; y < orig.h; ++y)
    for (int x = 0; x < orig.w; ++x)
      if (mask.at(y, x)) {
        double wv = std::max(wsum.at(y, x, 0), 1e-9);
        for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = acc.at(y, x, ch) / wv;
      }
  return out;
}

}  // namespace

std::pair<Image, Image> apply_generator(const Image& original, const BinaryMask& mask,
                                        const GeneratorSpec& spec) {
  check(mask.h == original.h && mask.w == original.w, "apply_generator: mask size mismatch");
  check(original.c == 3, "apply_generator: 3-channel image required");
  Image manipulated;
  switch (spec.family) {
    case Family::RepaintNoise: manipulated = repaint_noise(original, mask, spec); break;
    case Family::SmoothRemoval: manipulated = smooth_removal(original, mask, spec); break;
    case Family::TextureResynth: manipulated = texture_resynth(original, mask, spec); break;
    default: throw std::invalid_argument("apply_generator: unknown family");
  }
  clip01(manipulated);
  // rewritten pixels land on the dyadic grid; mask-0 pixels stay bit-equal to
  // the original regardless of its representation
  constexpr double kGrid = 4096.0;
  for (int y = 0; y < original.h; ++y)
    for (int x = 0; x < original.w; ++x)
      if (mask.at(y, x))
        for (int c = 0; c < 3; ++c)
          manipulated.at(y, x, c) = std::round(manipulated.at(y, x, c) * kGrid) / kGrid;
  Image trace(original.h, original.w, 3);
  for (size_t i = 0; i < trace.data.size(); ++i)
    trace.data[i] = manipulated.data[i] - original.data[i];
  return {std::move(manipulated), std::move(trace)};
}

Image mixup_blend(const Image& original, const Image& manipulated, double alpha) {
  check(alpha >= 0.5 && alpha <= 1.0, "mixup_blend: alpha must be in [0.5, 1.0]");
  check(original.h == manipulated.h && original.w == manipulated.w && original.c == manipulated.c,
        "mixup_blend: size mismatch");
  Image out(original.h, original.w, original.c);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = alpha * manipulated.data[i] + (1.0 - alpha) * original.data[i];
  return out;
}

SamplePair make_sample(int size, Family fam, TexturePool pool, uint64_t seed,
                       double coverage_lo, double coverage_hi) {
  SamplePair s;
  Image src = make_source_image(size, size, derive_seed(seed, 1), pool);
  // dyadic pixel grid keeps all trace arithmetic exact; still roundtrips
  // through the stored 8-bit files without drift
  s.original = snap_to_grid(from_u8(to_u8(src)));
  s.mask = generate_mask(size, size, derive_seed(seed, 2), {coverage_lo, coverage_hi});
  s.spec = GeneratorSpec::defaults(fam, derive_seed(seed, 3));
  auto [manip, trace_unused] = apply_generator(s.original, s.mask, s.spec);
  s.manipulated = std::move(manip);
  Rng arng(derive_seed(seed, 4));
  s.alpha = arng.uniform(0.5, 1.0);
  Image blended_raw = mixup_blend(s.original, s.manipulated, s.alpha);
  clip01(blended_raw);
  blended_raw = snap_to_grid(blended_raw);
  // off-mask pixels are untouched by the family transform; keep them bit-equal
  s.blended = blended_raw;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (!s.mask.at(y, x))
        for (int ch = 0; ch < 3; ++ch) s.blended.at(y, x, ch) = s.original.at(y, x, ch);
  s.trace3 = Image(size, size, 3);
  for (size_t i = 0; i < s.trace3.data.size(); ++i)
    s.trace3.data[i] = s.blended.data[i] - s.original.data[i];
  return s;
}

// ------------------------------------------------------------- manifest

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest: cannot write " + path);
  out << "# gimlab-manifest v1\n";
  out << "# seed: " << seed << "\n";
  out << "# fingerprint: " << fingerprint << "\n";
  for (const auto& e : entries)
    out << e.image_path << ' ' << e.mask_path << ' ' << e.label << ' ' << e.subset << ' '
        << e.split << ' ' << e.rec.serialize() << "\n";
  if (!out) throw std::runtime_error("manifest: write failure on " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path);
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto grab = [&](const char* key) -> std::optional<std::string> {
        std::string k = std::string("# ") + key + ": ";
        if (line.rfind(k, 0) == 0) return line.substr(k.size());
        return std::nullopt;
      };
      if (auto v = grab("seed")) m.seed = std::stoull(*v);
      if (auto v = grab("fingerprint")) m.fingerprint = *v;
      continue;
    }
    ManifestEntry e;
    char img[512], msk[512], subset[64], split[32], rec[96];
    int label = 0;
    if (std::sscanf(line.c_str(), "%511s %511s %d %63s %31s %95s", img, msk, &label, subset, split,
                    rec) != 6)
      throw std::runtime_error("manifest: malformed line: " + line);
    e.image_path = img;
    e.mask_path = msk;
    e.label = label;
    e.subset = subset;
    e.split = split;
    e.rec = degrade::DegradationRecord::parse(rec);
    m.entries.push_back(std::move(e));
  }
  return m;
}

std::vector<ManifestEntry> DatasetManifest::filter(const std::string& subset,
                                                   const std::string& split, int label) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (!subset.empty() && e.subset != subset) continue;
    if (!split.empty() && e.split != split) continue;
    if (label >= 0 && e.label != label) continue;
    out.push_back(e);
  }
  return out;
}

std::vector<std::string> DatasetManifest::subsets() const {
  std::vector<std::string> tags;
  for (const auto& e : entries)
    if (std::find(tags.begin(), tags.end(), e.subset) == tags.end()) tags.push_back(e.subset);
  return tags;
}

std::string clean_path_for(const ManifestEntry& e) {
  check(e.label == 1, "clean_path_for: only manipulated entries have a clean twin");
  std::string p = e.image_path;
  auto pos = p.find("images/");
  check(pos != std::string::npos, "clean_path_for: unexpected layout " + p);
  p.replace(pos, 7, "clean/");
  auto dot = p.rfind(".jpg");
  check(dot != std::string::npos, "clean_path_for: unexpected extension " + p);
  p.replace(dot, 4, ".png");
  return p;
}

std::string original_path_for(const ManifestEntry& e) {
  std::string p = e.image_path;
  auto pos = p.find("images/");
  check(pos != std::string::npos, "original_path_for: unexpected layout " + p);
  p.replace(pos, 7, "originals/");
  auto suffix = p.rfind("_f.jpg");
  if (suffix != std::string::npos)
    p.replace(suffix, 6, ".png");
  else {
    auto dot = p.rfind(".jpg");
    check(dot != std::string::npos, "original_path_for: unexpected extension " + p);
    p.replace(dot, 4, ".png");
  }
  return p;
}

// ------------------------------------------------------------- builder

namespace {

struct SubsetPlan {
  std::string tag;
  Family family;
  TexturePool pool;
  int train_count;
  int test_count;
};

std::string sanitize(const std::string& tag) {
  std::string s = tag;
  for (auto& c : s) {
    if (c == '-') c = '_';
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return s;
}

/// Writes the degraded image; for the jpeg op the degradation IS the stored
/// encoding, so it is encoded exactly once.
void write_degraded(const Image& img, const degrade::DegradationRecord& rec,
                    const std::string& path) {
  if (rec.op == degrade::Op::Jpeg) {
    std::vector<uint8_t> bytes = jpeg_encode(to_u8(img), static_cast<int>(rec.param));
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("build_dataset: cannot write " + path);
    size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw std::runtime_error("build_dataset: short write " + path);
    return;
  }
  Image d = degrade::apply(img, rec);
  write_jpeg(path, to_u8(d), kStorageJpegQuality);
}

}  // namespace

DatasetManifest build_dataset(const DatagenConfig& cfg, const std::string& out_dir) {
  check(cfg.train_per_family > 0 && cfg.test_per_family > 0 && cfg.cross_test > 0,
        "build_dataset: requested counts must be positive");
  check(cfg.image_size >= 64, "build_dataset: image size must be at least 64");

  std::vector<SubsetPlan> plans = {
      {family_subset_tag(Family::RepaintNoise), Family::RepaintNoise, TexturePool::Main,
       cfg.train_per_family, cfg.test_per_family},
      {family_subset_tag(Family::TextureResynth), Family::TextureResynth, TexturePool::Main,
       cfg.train_per_family, cfg.test_per_family},
      {family_subset_tag(Family::SmoothRemoval), Family::SmoothRemoval, TexturePool::Main,
       cfg.train_per_family, cfg.test_per_family},
      {"cross-dist", Family::RepaintNoise, TexturePool::HeldOut, 0, cfg.cross_test},
  };

  DatasetManifest manifest;
  manifest.seed = cfg.seed;
  manifest.fingerprint = cfg.fingerprint;
  manifest.root = out_dir;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::exists(out_dir)) throw std::runtime_error("build_dataset: cannot create " + out_dir);

  for (const auto& plan : plans) {
    std::string sdir = sanitize(plan.tag);
    for (const std::string split : {std::string("train"), std::string("test")}) {
      int count = split == "train" ? plan.train_count : plan.test_count;
      if (count == 0) continue;
      for (const char* sub : {"images", "masks", "originals", "clean"}) {
        fs::create_directories(fs::path(out_dir) / sub / sdir / split, ec);
        if (ec) throw std::runtime_error("build_dataset: cannot create output tree");
      }
      std::vector<std::array<ManifestEntry, 2>> local(static_cast<size_t>(count));
#pragma omp parallel for schedule(dynamic)
      for (int i = 0; i < count; ++i) {
        uint64_t pair_seed = derive_seed(cfg.seed, hash_str((plan.tag + "/" + split).c_str()) + static_cast<uint64_t>(i));
        SamplePair s = make_sample(cfg.image_size, plan.family, plan.pool, pair_seed,
                                   cfg.coverage_min, cfg.coverage_max);
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%06d", i);
        std::string id = idbuf;
        std::string rel_img_f = "images/" + sdir + "/" + split + "/" + id + "_f.jpg";
        std::string rel_img_a = "images/" + sdir + "/" + split + "/" + id + ".jpg";
        std::string rel_mask = "masks/" + sdir + "/" + split + "/" + id + "_f_mask.png";
        std::string rel_orig = "originals/" + sdir + "/" + split + "/" + id + ".png";
        std::string rel_clean = "clean/" + sdir + "/" + split + "/" + id + "_f.png";

        // lossless companions
        write_png(fs::path(out_dir) / rel_orig, to_u8(s.original));
        write_png(fs::path(out_dir) / rel_clean, to_u8(s.blended));
        ImageU8 msk;
        msk.h = s.mask.h;
        msk.w = s.mask.w;
        msk.c = 1;
        msk.data.resize(s.mask.pixels.size());
        for (size_t px = 0; px < msk.data.size(); ++px)
          msk.data[px] = s.mask.pixels[px] ? 255 : 0;
        write_png(fs::path(out_dir) / rel_mask, msk);

        // degraded inputs (both classes)
        degrade::DegradationRecord rec_m, rec_a;
        Image blended_q = from_u8(to_u8(s.blended));
        if (cfg.degrade) {
          uint64_t sm = derive_seed(pair_seed, 10), sa = derive_seed(pair_seed, 11);
          rec_m = degrade::random_degrade(blended_q, sm).second;
          rec_m.seed = sm;
          rec_a = degrade::random_degrade(s.original, sa).second;
          rec_a.seed = sa;
        }
        write_degraded(blended_q, rec_m, fs::path(out_dir) / rel_img_f);
        write_degraded(s.original, rec_a, fs::path(out_dir) / rel_img_a);

        ManifestEntry em{rel_img_f, rel_mask, 1, plan.tag, split, rec_m};
        ManifestEntry ea{rel_img_a, "-", 0, plan.tag, split, rec_a};
        local[static_cast<size_t>(i)] = {std::move(em), std::move(ea)};
      }
      for (auto& pr : local) {
        manifest.entries.push_back(std::move(pr[0]));
        manifest.entries.push_back(std::move(pr[1]));
      }
    }
  }
  manifest.save((fs::path(out_dir) / "manifest.txt").string());
  return manifest;
}

// ------------------------------------------------------------- analysis

std::vector<double> radial_log_power_spectrum(const Image& gray, int bins) {
  check(gray.c == 1, "radial_log_power_spectrum: single-channel input required");
  int h = gray.h, w = gray.w;
  std::vector<std::complex<double>> buf(static_cast<size_t>(h) * w);
  for (int64_t i = 0; i < static_cast<int64_t>(buf.size()); ++i)
    buf[static_cast<size_t>(i)] = {gray.data[static_cast<size_t>(i)], 0.0};
  fft2(h, w, buf.data(), false);
  std::vector<double> power(static_cast<size_t>(bins), 0.0);
  std::vector<int64_t> counts(static_cast<size_t>(bins), 0);
  double rmax = std::sqrt(0.25 + 0.25);  // nyquist radius in cycles/pixel
  for (int fy = 0; fy < h; ++fy)
    for (int fx = 0; fx < w; ++fx) {
      if (fy == 0 && fx == 0) continue;  // drop DC
      double ny = fy <= h / 2 ? fy / static_cast<double>(h) : (fy - h) / static_cast<double>(h);
      double nx = fx <= w / 2 ? fx / static_cast<double>(w) : (fx - w) / static_cast<double>(w);
      double r = std::sqrt(ny * ny + nx * nx) / rmax;
      int b = std::min(bins - 1, static_cast<int>(r * bins));
      power[static_cast<size_t>(b)] += std::norm(buf[static_cast<size_t>(fy) * w + fx]);
      ++counts[static_cast<size_t>(b)];
    }
  for (int b = 0; b < bins; ++b)
    power[static_cast<size_t>(b)] =
        std::log(power[static_cast<size_t>(b)] / std::max<int64_t>(counts[static_cast<size_t>(b)], 1) + 1e-12);
  return power;
}

}  // namespace gimlab::synth
