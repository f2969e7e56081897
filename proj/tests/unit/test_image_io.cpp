#include <doctest.h>

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "helpers.hpp"
#include "tbx/image_io.hpp"

using namespace tbx;

namespace {

// Minimal libpng writer for fixtures the library itself never produces.
void write_png_raw(const fs::path& path, int width, int height, int color_type,
                   int bit_depth, const std::vector<unsigned char>& bytes) {
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<unsigned char*>(bytes.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

}  // namespace

TEST_CASE("16-bit PNG round trip") {
  test::TempDir dir("png");
  std::vector<float> px;
  for (int i = 0; i < 12; ++i) px.push_back(static_cast<float>(i) / 11.0f);
  px[0] = -0.5f;  // clamped on write
  px[11] = 1.5f;
  io::write_png16(dir / "a.png", ImagePlane2D(4, 3, px));
  const ImagePlane2D back = io::read_png(dir / "a.png");
  CHECK(back.width() == 4);
  CHECK(back.height() == 3);
  CHECK(back.bit_depth() == 16);
  CHECK(back.at(0, 0) == 0.0f);
  CHECK(back.at(2, 3) == 1.0f);
  for (int i = 1; i < 11; ++i) {
    CHECK(std::abs(back.pixels()[i] - px[i]) <= 0.5f / 65535.0f + 1e-7f);
  }
}

TEST_CASE("8-bit gray and RGB PNG inputs") {
  test::TempDir dir("png8");
  write_png_raw(dir / "g.png", 3, 1, PNG_COLOR_TYPE_GRAY, 8, {0, 51, 255});
  const ImagePlane2D g = io::read_png(dir / "g.png");
  CHECK(g.bit_depth() == 8);
  CHECK(g.at(0, 1) == doctest::Approx(0.2));
  CHECK(g.at(0, 2) == 1.0f);

  // Equal channels convert to the same gray level.
  write_png_raw(dir / "c.png", 2, 1, PNG_COLOR_TYPE_RGB, 8, {102, 102, 102, 0, 0, 0});
  const ImagePlane2D c = io::read_png(dir / "c.png");
  CHECK(c.width() == 2);
  CHECK(c.at(0, 0) == doctest::Approx(0.4).epsilon(0.01));
  CHECK(c.at(0, 1) == 0.0f);
}

TEST_CASE("PNG errors") {
  test::TempDir dir("pngerr");
  CHECK_THROWS_AS(io::read_png(dir / "missing.png"), IoError);
  test::write_file(dir / "junk.png", "not a png");
  CHECK_THROWS_AS(io::read_png(dir / "junk.png"), IoError);
}

TEST_CASE("volume file layout") {
  test::TempDir dir("vol");
  std::vector<float> v(2 * 3 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.25f * static_cast<float>(i);
  const Volume3D vol(Dims3{2, 3, 4}, v, Provenance::phantom);
  io::write_volume(dir / "x.vol", vol);

  CHECK(test::read_file(dir / "x.vol.json") == R"({"dims":[2,3,4],"provenance":"phantom"})");
  const std::string raw = test::read_file(dir / "x.vol");
  REQUIRE(raw.size() == v.size() * 4);
  // Little-endian float32, depth-major: voxel (1,2,3) is the last one.
  float last = 0;
  unsigned char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(raw[raw.size() - 4 + k]);
  const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t{b[3]} << 24);
  std::memcpy(&last, &bits, 4);
  CHECK(last == vol.at(1, 2, 3));

  const Volume3D back = io::read_volume(dir / "x.vol");
  CHECK(back == vol);

  test::write_file(dir / "y.vol", raw.substr(0, 20));
  test::write_file(dir / "y.vol.json", R"({"dims":[2,3,4],"provenance":"phantom"})");
  CHECK_THROWS_AS(io::read_volume(dir / "y.vol"), IoError);
  CHECK_THROWS_AS(io::read_volume(dir / "none.vol"), IoError);
}

TEST_CASE("checkpoint round trip") {
  test::TempDir dir("ckpt");
  const io::Checkpoint c{R"({"kind":"x"})", {1.0f, -2.5f, 3.25f}};
  io::write_checkpoint(dir / "c.ckpt", c);
  const io::Checkpoint back = io::read_checkpoint(dir / "c.ckpt");
  CHECK(back.header_json == c.header_json);
  CHECK(back.values == c.values);
  CHECK_THROWS_AS(io::write_checkpoint(dir / "d.ckpt", {"a\nb", {}}), InvalidArgument);
}
