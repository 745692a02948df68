#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gimlab/degrade.hpp"
#include "gimlab/image.hpp"

namespace gimlab::synth {

struct SourceImage {
  Image pixels;  // HxWx3 in [0,1], H,W >= 64
  std::string id;
};

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> pixels;  // 0/1

  uint8_t at(int y, int x) const { return pixels[static_cast<size_t>(y) * w + x]; }
  uint8_t& at(int y, int x) { return pixels[static_cast<size_t>(y) * w + x]; }
  int64_t positive_count() const;
  double coverage() const;
  int component_count() const;  // 4-connectivity
};

/// Procedural manipulation families. Each one rewrites the masked region with
/// a distinct mechanism and leaves a distinct residual spectrum.
enum class Family { RepaintNoise, SmoothRemoval, TextureResynth };

const char* family_name(Family f);
const char* family_subset_tag(Family f);  // SD-like / DDNM-like / GLIDE-like

struct GeneratorSpec {
  Family family = Family::RepaintNoise;
  uint64_t seed = 0;
  // repaint-noise
  double noise_amp = 0.18;
  double band_sigma_low = 0.8;
  double band_sigma_high = 2.5;
  int mean_kernel = 15;
  // smooth-removal
  int diffusion_iters = 200;
  int smooth_kernel = 7;
  // texture-resynth
  int patch = 7;

  static GeneratorSpec defaults(Family f, uint64_t seed);
};

/// Texture distribution the procedural originals are drawn from. HeldOut is
/// the cross-distribution pool used only by the cross-dist subset.
enum class TexturePool { Main, HeldOut };

Image make_source_image(int h, int w, uint64_t seed, TexturePool pool);

/// Snap values to the k/levels grid. Pipeline images live on this grid so
/// that trace arithmetic (differences and sums of pixel values) is exact in
/// double precision.
Image snap_to_grid(const Image& img, int levels = 4096);

/// Smooth organic blob mask with exact pixel-count coverage inside the bounds.
BinaryMask generate_mask(int height, int width, uint64_t rng_seed,
                         std::pair<double, double> coverage_bounds);

/// Applies the family transform inside the mask. Returns (manipulated, trace)
/// with trace == manipulated - original elementwise and manipulated equal to
/// the original at every mask-0 pixel.
std::pair<Image, Image> apply_generator(const Image& original, const BinaryMask& mask,
                                        const GeneratorSpec& spec);

/// alpha*manipulated + (1-alpha)*original, alpha in [0.5, 1.0].
Image mixup_blend(const Image& original, const Image& manipulated, double alpha);

/// One fully assembled pre-degradation sample.
struct SamplePair {
  Image original;     // 8-bit quantized original
  Image manipulated;  // clipped family output
  Image blended;      // mixup result, exactly equal to original off-mask
  Image trace3;       // blended - original (signed)
  BinaryMask mask;
  double alpha = 1.0;
  GeneratorSpec spec;
};

SamplePair make_sample(int size, Family fam, TexturePool pool, uint64_t seed,
                       double coverage_lo, double coverage_hi);

// ------------------------------------------------------------- dataset

struct ManifestEntry {
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;   // "-" when authentic
  int label = 0;
  std::string subset;
  std::string split;
  degrade::DegradationRecord rec;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  uint64_t seed = 0;
  std::string fingerprint;
  std::string root;  // directory the paths are relative to

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);

  std::vector<ManifestEntry> filter(const std::string& subset, const std::string& split,
                                    int label = -1) const;
  std::vector<std::string> subsets() const;
};

/// Lossless pre-degradation manipulated image path for a label-1 entry.
std::string clean_path_for(const ManifestEntry& e);
/// Lossless original (authentic, pre-degradation) path for any entry.
std::string original_path_for(const ManifestEntry& e);

struct DatagenConfig {
  int train_per_family = 300;
  int test_per_family = 100;
  int cross_test = 100;
  int image_size = 64;
  double coverage_min = 0.05;
  double coverage_max = 0.5;
  bool degrade = true;
  uint64_t seed = 0;
  std::string fingerprint;  // config hash, stamped into the manifest
};

/// Writes images/masks under out_dir and returns the manifest (also written
/// to out_dir/manifest.txt). 1:1 authentic/manipulated pairing per subset.
DatasetManifest build_dataset(const DatagenConfig& cfg, const std::string& out_dir);

/// Radially averaged log power spectrum of a signed single-channel image;
/// used to compare residual statistics across families.
std::vector<double> radial_log_power_spectrum(const Image& gray, int bins);

}  // namespace gimlab::synth
