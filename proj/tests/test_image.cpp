#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "gimlab/image.hpp"
#include "testutil.hpp"

using namespace gimlab;
namespace fs = std::filesystem;

TEST_CASE("png roundtrip is lossless") {
  Rng rng(1);
  Image img = testutil::rand_image(17, 23, 3, rng);
  ImageU8 u8 = to_u8(img);
  std::string path = (fs::temp_directory_path() / "gimlab_roundtrip.png").string();
  write_png(path, u8);
  ImageU8 back = read_png(path);
  REQUIRE(back.h == 17);
  REQUIRE(back.w == 23);
  REQUIRE(back.c == 3);
  CHECK(back.data == u8.data);

  // single channel
  Image gray = testutil::rand_image(9, 9, 1, rng);
  write_png(path, to_u8(gray));
  ImageU8 gback = read_png(path);
  CHECK(gback.c == 1);
  CHECK(gback.data == to_u8(gray).data);
  fs::remove(path);
}

TEST_CASE("jpeg roundtrip is deterministic and close at high quality") {
  Rng rng(2);
  Image img = testutil::rand_image(32, 32, 3, rng);
  ImageU8 u8 = to_u8(img);
  auto b1 = jpeg_encode(u8, 90);
  auto b2 = jpeg_encode(u8, 90);
  CHECK(b1 == b2);
  ImageU8 d1 = jpeg_decode(b1.data(), b1.size());
  ImageU8 d2 = jpeg_decode(b1.data(), b1.size());
  CHECK(d1.data == d2.data);
  REQUIRE(d1.h == 32);
  REQUIRE(d1.c == 3);
}

TEST_CASE("read_image dispatches on magic bytes") {
  Rng rng(3);
  Image img = testutil::rand_image(16, 16, 3, rng);
  std::string p1 = (fs::temp_directory_path() / "gimlab_a.png").string();
  std::string p2 = (fs::temp_directory_path() / "gimlab_b.jpg").string();
  write_png(p1, to_u8(img));
  write_jpeg(p2, to_u8(img), 95);
  CHECK(read_image(p1).data == to_u8(img).data);
  CHECK(read_image(p2).h == 16);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("gaussian kernel properties") {
  auto k3 = gaussian_kernel(3, 0.8);
  double sum = 0.0;
  for (double v : k3) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(k3[0] == doctest::Approx(k3[2]));
  CHECK(k3[1] > k3[0]);
  auto k1 = gaussian_kernel(1, 0.8);
  CHECK(k1[0] == 1.0);
  CHECK_THROWS_AS(gaussian_kernel(4, 1.0), std::invalid_argument);
}

TEST_CASE("bilinear resize: identity, constants, and factor-2 means") {
  Rng rng(4);
  Image img = testutil::rand_image(8, 8, 3, rng);
  Image same = bilinear_resize(img, 8, 8);
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(same.data[i] == img.data[i]);

  Image constant(6, 6, 1);
  for (auto& v : constant.data) v = 0.37;
  Image small = bilinear_resize(constant, 3, 3);
  for (double v : small.data) CHECK(v == doctest::Approx(0.37));

  // exact 2x downsample with half-pixel centers averages 2x2 blocks
  Image img2 = testutil::rand_image(4, 4, 1, rng);
  Image down = bilinear_resize(img2, 2, 2);
  CHECK(down.at(0, 0, 0) ==
        doctest::Approx(0.25 * (img2.at(0, 0, 0) + img2.at(0, 1, 0) + img2.at(1, 0, 0) +
                                img2.at(1, 1, 0))));
}

TEST_CASE("box blur and channel mean") {
  Rng rng(5);
  Image img = testutil::rand_image(5, 5, 1, rng);
  Image b = box_blur(img, 3);
  // interior pixel equals the 3x3 mean
  double acc = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) acc += img.at(2 + dy, 2 + dx, 0);
  CHECK(b.at(2, 2, 0) == doctest::Approx(acc / 9.0));

  Image rgb = testutil::rand_image(3, 3, 3, rng);
  Image m = channel_mean(rgb);
  CHECK(m.at(1, 1, 0) ==
        doctest::Approx((rgb.at(1, 1, 0) + rgb.at(1, 1, 1) + rgb.at(1, 1, 2)) / 3.0));
}

TEST_CASE("chw conversion roundtrip") {
  Rng rng(6);
  Image img = testutil::rand_image(5, 7, 3, rng);
  Tensor t = image_to_chw(img);
  REQUIRE(t.shape == std::vector<int64_t>{3, 5, 7});
  Image back = chw_to_image(t);
  CHECK(back.data == img.data);
  CHECK(t[(2 * 5 + 4) * 7 + 6] == img.at(4, 6, 2));
}
