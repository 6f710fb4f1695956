#include <filesystem>

#include "dit/imaging.hpp"
#include "dit/rng.hpp"
#include "doctest.h"

using namespace dit;
namespace fs = std::filesystem;

namespace {

Image ramp(std::size_t w, std::size_t h, std::size_t c) {
  Image img(w, h, c);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>((i * 37) % 256);
  return img;
}

}  // namespace

TEST_CASE("224x224 patchifies into 196 patches of 16x16x3") {
  const PatchSequence seq = patchify(ramp(224, 224, 3), 16);
  CHECK(seq.grid_h == 14);
  CHECK(seq.grid_w == 14);
  CHECK(seq.patches.size() == 196);
  CHECK(seq.patches[0].size() == 16 * 16 * 3);
}

TEST_CASE("patchify then unpatchify is the identity") {
  const Image img = ramp(48, 32, 2);
  const Image back = unpatchify(patchify(img, 16));
  CHECK(back.width == 48);
  CHECK(back.height == 32);
  CHECK(back.data == img.data);
}

TEST_CASE("patch layout is (y, x, c) within a patch, patches row-major") {
  const Image img = ramp(32, 16, 1);
  const PatchSequence seq = patchify(img, 16);
  CHECK(seq.patches[1][0] == img.at(16, 0));
  CHECK(seq.patches[1][16 * 3 + 5] == img.at(21, 3));
}

TEST_CASE("patchify rejects sizes that are not patch multiples") {
  CHECK_THROWS(patchify(Image(30, 32, 1), 16));
}

TEST_CASE("resize to the same size is the identity; constants stay constant") {
  const Image img = ramp(20, 12, 1);
  CHECK(resize(img, 20, 12).data == img.data);
  const Image flat = resize(Image(17, 9, 1, 200.0f), 40, 31);
  for (float v : flat.data) CHECK(v == doctest::Approx(200.0f));
}

TEST_CASE("crop and pad geometry") {
  const Image img = ramp(10, 8, 1);
  const Image c = crop(img, {2, 3, 4, 2});
  CHECK(c.width == 4);
  CHECK(c.at(0, 0) == img.at(2, 3));
  CHECK(c.at(3, 1) == img.at(5, 4));
  CHECK_THROWS(crop(img, {8, 0, 4, 2}));
  const Image p = pad_to(img, 16, 16, 255.0f);
  CHECK(p.at(9, 7) == img.at(9, 7));
  CHECK(p.at(15, 15) == 255.0f);
  CHECK(p.at(10, 0) == 255.0f);
}

TEST_CASE("gray and RGB conversion") {
  Image rgb(1, 1, 3);
  rgb.data = {30, 60, 90};
  CHECK(to_channels(rgb, 1).data[0] == doctest::Approx(60));
  CHECK(to_channels(to_channels(rgb, 1), 3).data == std::vector<float>{60, 60, 60});
}

TEST_CASE("normalize with mean 0.5 and std 0.5 maps [0,255] to [-1,1]") {
  Image img(2, 1, 1);
  img.data = {0, 255};
  const Image n = normalize(img, {0.5f}, {0.5f});
  CHECK(n.data[0] == doctest::Approx(-1));
  CHECK(n.data[1] == doctest::Approx(1));
}

TEST_CASE("adaptive binarisation gives pure black and white, keeps dark ink") {
  Image img(64, 64, 1, 230.0f);
  for (std::size_t x = 10; x < 50; ++x) img.at(x, 30) = 20.0f;
  const Image b = adaptive_binarize(img);
  for (float v : b.data) CHECK((v == 0.0f || v == 255.0f));
  CHECK(b.at(20, 30) == 0.0f);
  CHECK(b.at(5, 5) == 255.0f);
}

TEST_CASE("random resized crop stays inside the image and honours the area range") {
  Rng rng(4);
  const ResizedCropParams p{};
  for (int i = 0; i < 200; ++i) {
    const CropRect r = sample_resized_crop(rng, 300, 200, p);
    CHECK(r.x + r.w <= 300);
    CHECK(r.y + r.h <= 200);
    CHECK(static_cast<double>(r.w * r.h) >= 0.6 * 300 * 200);
  }
}

TEST_CASE("multi-scale target dims cap the long side at 1333") {
  CHECK(multiscale_target_dims(1000, 500, 800) == std::pair<std::size_t, std::size_t>{1333, 667});
  CHECK(multiscale_target_dims(600, 800, 480) == std::pair<std::size_t, std::size_t>{480, 640});
}

TEST_CASE("PNG and PGM round trips are lossless for 8-bit data") {
  const fs::path dir = fs::temp_directory_path() / "dit_test_imaging";
  fs::create_directories(dir);
  const Image gray = ramp(13, 7, 1);
  save_png(gray, dir / "g.png");
  CHECK(load_image(dir / "g.png").data == gray.data);
  save_pgm(gray, dir / "g.pgm");
  CHECK(load_image(dir / "g.pgm").data == gray.data);
  const Image rgb = ramp(5, 4, 3);
  save_png(rgb, dir / "c.png");
  const Image back = load_image(dir / "c.png");
  CHECK(back.channels == 3);
  CHECK(back.data == rgb.data);
  CHECK_THROWS(load_image(dir / "missing.png"));
}
