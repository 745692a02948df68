#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include <filesystem>
#include <set>

#include "gimlab/dataio.hpp"
#include "gimlab/synthgen.hpp"
#include "testutil.hpp"

using namespace gimlab;
using namespace gimlab::synth;
namespace fs = std::filesystem;

TEST_CASE("generate_mask: coverage bounds, determinism, blobs") {
  BinaryMask m = generate_mask(64, 64, 7, {0.05, 0.5});
  CHECK(m.coverage() >= 0.05);
  CHECK(m.coverage() <= 0.5);
  CHECK(m.component_count() >= 1);
  BinaryMask m2 = generate_mask(64, 64, 7, {0.05, 0.5});
  CHECK(m.pixels == m2.pixels);  // bit-identical
  BinaryMask m3 = generate_mask(64, 64, 8, {0.05, 0.5});
  CHECK(m.pixels != m3.pixels);

  // blobs, not salt-and-pepper: far fewer components than positive pixels
  CHECK(m.component_count() < 20);

  CHECK_THROWS_AS(generate_mask(32, 64, 7, {0.05, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(generate_mask(64, 64, 7, {0.99, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(generate_mask(64, 64, 7, {0.5, 0.1}), std::invalid_argument);
}

TEST_CASE("apply_generator: identity under empty mask, exact reconstruction") {
  Image orig = snap_to_grid(make_source_image(64, 64, 11, TexturePool::Main));
  BinaryMask empty;
  empty.h = 64;
  empty.w = 64;
  empty.pixels.assign(64 * 64, 0);
  for (Family f : {Family::RepaintNoise, Family::SmoothRemoval, Family::TextureResynth}) {
    auto [manip, trace] = apply_generator(orig, empty, GeneratorSpec::defaults(f, 5));
    CHECK(manip.data == orig.data);
    for (double v : trace.data) CHECK(v == 0.0);
  }

  BinaryMask mask = generate_mask(64, 64, 3, {0.1, 0.3});
  for (Family f : {Family::RepaintNoise, Family::SmoothRemoval, Family::TextureResynth}) {
    auto [manip, trace] = apply_generator(orig, mask, GeneratorSpec::defaults(f, 5));
    // original + trace reconstructs manipulated to machine precision
    for (size_t i = 0; i < manip.data.size(); ++i)
      CHECK(orig.data[i] + trace.data[i] == manip.data[i]);
    // untouched outside the mask
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (!mask.at(y, x))
          for (int c = 0; c < 3; ++c) CHECK(manip.at(y, x, c) == orig.at(y, x, c));
    // clipped
    for (double v : manip.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("smooth-removal lowers in-mask variance on a checkerboard") {
  Image checker(64, 64, 3);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) checker.at(y, x, c) = ((x / 4 + y / 4) % 2) ? 0.85 : 0.15;
  BinaryMask mask = generate_mask(64, 64, 9, {0.15, 0.3});
  auto [manip, trace] = apply_generator(checker, mask, GeneratorSpec::defaults(Family::SmoothRemoval, 1));

  auto in_mask_variance = [&](const Image& img) {
    double mu = 0.0;
    int64_t n = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (mask.at(y, x))
          for (int c = 0; c < 3; ++c) {
            mu += img.at(y, x, c);
            ++n;
          }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (mask.at(y, x))
          for (int c = 0; c < 3; ++c) var += (img.at(y, x, c) - mu) * (img.at(y, x, c) - mu);
    return var / static_cast<double>(n);
  };
  double v_orig = in_mask_variance(checker);
  double v_manip = in_mask_variance(manip);
  // independent smoothing oracle: box blur establishes the expected direction
  // and magnitude of the variance drop
  double v_box = in_mask_variance(box_blur(checker, 5));
  CHECK(v_box < v_orig);
  CHECK(v_manip < v_orig);
  CHECK(v_manip < 0.25 * v_orig);
  CHECK(v_manip < 2.0 * v_box);
}

TEST_CASE("mixup_blend identities and trace scaling") {
  Rng rng(21);
  Image orig = testutil::rand_image(8, 8, 3, rng);
  Image manip = testutil::rand_image(8, 8, 3, rng);
  Image b1 = mixup_blend(orig, manip, 1.0);
  CHECK(b1.data == manip.data);  // alpha 1 returns the manipulated image exactly
  Image b5 = mixup_blend(orig, manip, 0.5);
  for (size_t i = 0; i < b5.data.size(); ++i)
    CHECK(b5.data[i] == doctest::Approx(0.5 * (orig.data[i] + manip.data[i])));
  // blended - original == alpha * (manipulated - original), elementwise
  double alpha = 0.7;
  Image b7 = mixup_blend(orig, manip, alpha);
  for (size_t i = 0; i < b7.data.size(); ++i)
    CHECK(b7.data[i] - orig.data[i] ==
          doctest::Approx(alpha * (manip.data[i] - orig.data[i])).epsilon(1e-12));
  CHECK_THROWS_AS(mixup_blend(orig, manip, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(mixup_blend(orig, manip, 1.1), std::invalid_argument);
}

TEST_CASE("make_sample satisfies the data contract") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Family f = static_cast<Family>(seed % 3);
    SamplePair s = make_sample(64, f, TexturePool::Main, seed, 0.05, 0.5);
    CHECK(s.mask.positive_count() >= 1);
    CHECK(s.alpha >= 0.5);
    CHECK(s.alpha <= 1.0);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (!s.mask.at(y, x))
          for (int c = 0; c < 3; ++c) CHECK(s.blended.at(y, x, c) == s.original.at(y, x, c));
    for (size_t i = 0; i < s.trace3.data.size(); ++i)
      CHECK(s.original.data[i] + s.trace3.data[i] == s.blended.data[i]);
  }
}

TEST_CASE("generator families are separable from radial residual spectra") {
  const int per_family = 200;
  const int bins = 16;
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int fi = 0; fi < 3; ++fi) {
    for (int i = 0; i < per_family; ++i) {
      SamplePair s = make_sample(64, static_cast<Family>(fi), TexturePool::Main,
                                 static_cast<uint64_t>(fi * 100000 + i), 0.05, 0.5);
      Image gray = channel_mean(s.trace3);
      feats.push_back(radial_log_power_spectrum(gray, bins));
      labels.push_back(fi);
    }
  }
  // 60/40 split, one-vs-rest ridge regression
  int n = static_cast<int>(feats.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(99);
  rng.shuffle(order);
  int ntrain = n * 6 / 10;
  Eigen::MatrixXd X(ntrain, bins + 1);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Constant(ntrain, 3, -1.0);
  for (int i = 0; i < ntrain; ++i) {
    for (int j = 0; j < bins; ++j) X(i, j) = feats[order[i]][j];
    X(i, bins) = 1.0;
    Y(i, labels[order[i]]) = 1.0;
  }
  Eigen::MatrixXd A = X.transpose() * X + 1e-3 * Eigen::MatrixXd::Identity(bins + 1, bins + 1);
  Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);
  int correct = 0, total = 0;
  for (int i = ntrain; i < n; ++i) {
    Eigen::VectorXd f(bins + 1);
    for (int j = 0; j < bins; ++j) f(j) = feats[order[i]][j];
    f(bins) = 1.0;
    Eigen::VectorXd scores = W.transpose() * f;
    int pred = 0;
    scores.maxCoeff(&pred);
    correct += pred == labels[order[i]];
    ++total;
  }
  double acc = static_cast<double>(correct) / total;
  INFO("held-out family classification accuracy: " << acc);
  CHECK(acc > 1.0 / 3.0 + 0.2);
}

TEST_CASE("build_dataset: counts, determinism, layout, loaders") {
  DatagenConfig cfg;
  cfg.train_per_family = 3;
  cfg.test_per_family = 2;
  cfg.cross_test = 2;
  cfg.image_size = 64;
  cfg.seed = 5;
  cfg.fingerprint = "test-fp-1";
  std::string dir = (fs::temp_directory_path() / "gimlab_ds_test").string();
  fs::remove_all(dir);
  DatasetManifest m = build_dataset(cfg, dir);

  // 3 families * (3 train + 2 test) * 2 labels + cross-dist 2 * 2 labels
  CHECK(m.entries.size() == 3 * 5 * 2 + 2 * 2);
  CHECK(m.filter("SD-like", "train", 1).size() == 3);
  CHECK(m.filter("SD-like", "train", 0).size() == 3);
  CHECK(m.filter("cross-dist", "train").size() == 0);
  CHECK(m.filter("cross-dist", "test").size() == 4);
  auto tags = m.subsets();
  CHECK(tags.size() == 4);

  // manifest roundtrip
  DatasetManifest loaded = DatasetManifest::load((fs::path(dir) / "manifest.txt").string());
  CHECK(loaded.entries.size() == m.entries.size());
  CHECK(loaded.fingerprint == "test-fp-1");
  CHECK(loaded.seed == 5);
  CHECK(loaded.entries[0].image_path == m.entries[0].image_path);

  // file conventions: manipulated are _f.jpg, masks are 0/255 png
  auto manip = m.filter("SD-like", "train", 1);
  CHECK(manip[0].image_path.find("_f.jpg") != std::string::npos);
  ImageU8 mask_png = read_png((fs::path(dir) / manip[0].mask_path).string());
  CHECK(mask_png.c == 1);
  std::set<uint8_t> values(mask_png.data.begin(), mask_png.data.end());
  for (uint8_t v : values) CHECK((v == 0 || v == 255));

  // loaders: authentic trace target is zero; manipulated reconstructs
  data::ImageCache cache(dir);
  auto auth = m.filter("SD-like", "train", 0);
  Tensor zero_target = data::load_trace_target(cache, auth[0]);
  for (double v : zero_target.data) CHECK(v == 0.0);
  Tensor t1 = data::load_trace_target(cache, manip[0]);
  CHECK(t1.shape == std::vector<int64_t>{1, 64, 64});

  // determinism: rebuilding with the same seed gives identical manifests and files
  std::string dir2 = (fs::temp_directory_path() / "gimlab_ds_test2").string();
  fs::remove_all(dir2);
  DatasetManifest m2 = build_dataset(cfg, dir2);
  REQUIRE(m2.entries.size() == m.entries.size());
  for (size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(m.entries[i].image_path == m2.entries[i].image_path);
    CHECK(m.entries[i].rec.serialize() == m2.entries[i].rec.serialize());
    ImageU8 a = read_image((fs::path(dir) / m.entries[i].image_path).string());
    ImageU8 b = read_image((fs::path(dir2) / m2.entries[i].image_path).string());
    CHECK(a.data == b.data);
  }

  // zero counts are rejected
  DatagenConfig bad = cfg;
  bad.train_per_family = 0;
  CHECK_THROWS_AS(build_dataset(bad, dir2), std::invalid_argument);

  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("companion path helpers") {
  ManifestEntry e;
  e.image_path = "images/sd_like/train/000001_f.jpg";
  e.mask_path = "masks/sd_like/train/000001_f_mask.png";
  e.label = 1;
  CHECK(clean_path_for(e) == "clean/sd_like/train/000001_f.png");
  CHECK(original_path_for(e) == "originals/sd_like/train/000001.png");
  ManifestEntry a;
  a.image_path = "images/sd_like/train/000001.jpg";
  a.mask_path = "-";
  a.label = 0;
  CHECK(original_path_for(a) == "originals/sd_like/train/000001.png");
  CHECK_THROWS_AS(clean_path_for(a), std::invalid_argument);
}

TEST_CASE("held-out texture pool differs from the main pool") {
  Image main_img = make_source_image(64, 64, 123, TexturePool::Main);
  Image held = make_source_image(64, 64, 123, TexturePool::HeldOut);
  CHECK(main_img.data != held.data);
}
