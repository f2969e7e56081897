#include <doctest.h>

#include <cmath>
#include <numeric>

#include "tbx/preprocessing.hpp"

using namespace tbx;
using namespace tbx::preprocessing;

namespace {

ImagePlane2D random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(static_cast<std::size_t>(w) * h);
  for (float& x : px) x = u(rng);
  return ImagePlane2D(w, h, px);
}

std::pair<double, double> mean_std(std::span<const float> v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (float x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

bool same(const nn::Tensor& a, const nn::Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

// Direct (non-separable) 2D convolution with a normalized Gaussian.
Grid blur_oracle(const Grid& g, int k, double sigma) {
  const int r = k / 2;
  std::vector<double> w1(k);
  double s = 0;
  for (int i = 0; i < k; ++i) s += w1[i] = std::exp(-(i - r) * (i - r) / (2 * sigma * sigma));
  Grid out{g.height, g.width, std::vector<float>(g.values.size())};
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      double acc = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = reflect101(y + dy, g.height), xx = reflect101(x + dx, g.width);
          acc += w1[dy + r] * w1[dx + r] / (s * s) * g.values[yy * g.width + xx];
        }
      out.values[y * g.width + x] = static_cast<float>(acc);
    }
  return out;
}

Volume3D ramp_volume(Dims3 dims) {
  std::vector<float> v(dims.count());
  for (int d = 0; d < dims.depth; ++d)
    for (int i = 0; i < dims.height * dims.width; ++i)
      v[static_cast<std::size_t>(d) * dims.height * dims.width + i] =
          static_cast<float>(d) + 0.001f * static_cast<float>(i % 7);
  return Volume3D(dims, v, Provenance::phantom);
}

}  // namespace

TEST_CASE("bilinear resize uses half-pixel centers") {
  const Grid g{1, 2, {0.0f, 1.0f}};
  const Grid up = resize_bilinear(g, 1, 4);
  CHECK(up.values == std::vector<float>{0.0f, 0.25f, 0.75f, 1.0f});
  const Grid same = resize_bilinear(to_grid(random_image(5, 3, 1)), 3, 5);
  CHECK(same.values == to_grid(random_image(5, 3, 1)).values);
  const Grid c = resize_bilinear(Grid{2, 2, {0.4f, 0.4f, 0.4f, 0.4f}}, 7, 3);
  for (float x : c.values) CHECK(x == doctest::Approx(0.4f));
  // Region resize of the full extent equals a plain resize.
  const Grid src = to_grid(random_image(9, 6, 2));
  CHECK(resize_region(src, 0, 0, 6, 9, 4, 5).values == resize_bilinear(src, 4, 5).values);
  CHECK_THROWS_AS(resize_region(src, 2, 2, 6, 9, 4, 5), InvalidArgument);
}

TEST_CASE("gaussian blur matches a direct 2D convolution") {
  const Grid g = to_grid(random_image(11, 7, 3));
  const Grid b = gaussian_blur(g);
  const Grid o = blur_oracle(g, kBlurKernel, kBlurSigma);
  for (std::size_t i = 0; i < b.values.size(); ++i) CHECK(b.values[i] == doctest::Approx(o.values[i]).epsilon(1e-5));

  const Grid flat = gaussian_blur(Grid{4, 4, std::vector<float>(16, 0.3f)});
  for (float x : flat.values) CHECK(x == doctest::Approx(0.3f).epsilon(1e-6));
}

TEST_CASE("standardize and min-max") {
  Grid g = to_grid(random_image(20, 10, 4));
  standardize(g);
  const auto [m, s] = mean_std(g.values);
  CHECK(std::abs(m) < 1e-6);
  CHECK(std::abs(s - 1.0) < 1e-6);

  ScopedWarningCapture capture;
  Grid c{2, 2, {0.5f, 0.5f, 0.5f, 0.5f}};
  standardize(c);
  CHECK(c.values == std::vector<float>(4, 0.0f));
  Grid d{2, 2, {0.5f, 0.5f, 0.5f, 0.5f}};
  min_max_normalize(d);
  CHECK(d.values == std::vector<float>(4, 0.0f));
  CHECK(capture.count() == 2);

  Grid e{1, 3, {2.0f, 4.0f, 3.0f}};
  min_max_normalize(e);
  CHECK(e.values == std::vector<float>{0.0f, 1.0f, 0.5f});
}

TEST_CASE("crop windows") {
  Rng rng(8);
  for (int k = 0; k < 500; ++k) {
    const CropWindow c = sample_crop(kXrayResize, rng);
    REQUIRE(c.top >= 0);
    REQUIRE(c.left >= 0);
    REQUIRE(c.top + c.height <= kXrayResize);
    REQUIRE(c.left + c.width <= kXrayResize);
    const double area = static_cast<double>(c.height) * c.width / (kXrayResize * kXrayResize);
    CHECK(area >= kCropScaleMin - 0.01);
    CHECK(area <= kCropScaleMax + 1e-12);
    const double ratio = static_cast<double>(c.width) / c.height;
    CHECK(ratio >= 0.75 - 0.01);
    CHECK(ratio <= 4.0 / 3.0 + 0.01);
  }
}

TEST_CASE("2D X-ray path") {
  const ImagePlane2D img = random_image(100, 80, 5);
  Rng rng(1), untouched(1), reference(1);
  const nn::Tensor eval = preprocess_xray_2d(img, false, untouched);
  CHECK(untouched() == reference());
  CHECK(eval.shape() == nn::Shape{1, 1, kXrayCrop, kXrayCrop});
  const auto [m, s] = mean_std(eval.data());
  CHECK(std::abs(m) < 1e-6);
  CHECK(std::abs(s - 1.0) < 1e-6);
  Rng again(1);
  CHECK(same(preprocess_xray_2d(img, false, again), eval));

  Rng t1(9), t2(9);
  const nn::Tensor a = preprocess_xray_2d(img, true, t1);
  const nn::Tensor b = preprocess_xray_2d(img, true, t2);
  CHECK(same(a, b));
  const auto [ma, sa] = mean_std(a.data());
  CHECK(std::abs(ma) < 1e-6);
  CHECK(std::abs(sa - 1.0) < 1e-6);

  ScopedWarningCapture capture;
  const nn::Tensor z =
      preprocess_xray_2d(ImagePlane2D(8, 8, std::vector<float>(64, 0.7f)), false, rng);
  for (float x : z.data()) CHECK(x == 0.0f);
  CHECK(capture.count() >= 1);
  CHECK_THROWS_AS(preprocess_xray_2d(ImagePlane2D(), false, rng), InvalidArgument);
}

TEST_CASE("fusion X-ray path") {
  const nn::Tensor t = preprocess_xray_fusion(random_image(364, 364, 6));
  CHECK(t.shape() == nn::Shape{1, 1, kFusionSize, kFusionSize});
  for (float x : t.data()) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
  std::vector<float> px(128 * 128, 0.0f);
  px[64 * 128 + 64] = 1.0f;
  const nn::Tensor spot = preprocess_xray_fusion(ImagePlane2D(128, 128, px));
  CHECK(*std::max_element(spot.data().begin(), spot.data().end()) < 1.0f);
  CHECK(*std::max_element(spot.data().begin(), spot.data().end()) > 0.0f);
}

TEST_CASE("central slices") {
  CHECK(central_slices(64, 2) == std::vector<int>{31, 32});
  CHECK(central_slices(3, 2) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(central_slices(1, 2), InvalidArgument);
  CHECK_THROWS_AS(central_slices(5, 0), InvalidArgument);
  for (int depth = 1; depth <= 64; ++depth) {
    for (int k = 1; k <= depth; ++k) {
      const auto s = central_slices(depth, k);
      REQUIRE(s.size() == static_cast<std::size_t>(k));
      CHECK(s.front() >= 0);
      CHECK(s.back() < depth);
      for (int i = 1; i < k; ++i) CHECK(s[i] == s[i - 1] + 1);
    }
  }
}

TEST_CASE("CT normalization") {
  const Volume3D v = ramp_volume({64, 32, 32});
  const nn::Tensor two = normalize_ct(v, SliceMode::TWO_SLICE);
  CHECK(two.shape() == nn::Shape{2, 1, kFusionSize, kFusionSize});
  const float vmax = 63.006f;
  CHECK(two.at(0, 0, 0, 0) == doctest::Approx(31.0 / vmax).epsilon(1e-3));
  CHECK(two.at(1, 0, 0, 0) == doctest::Approx(32.0 / vmax).epsilon(1e-3));
  const nn::Tensor full = normalize_ct(v, SliceMode::FULL);
  CHECK(full.shape() == nn::Shape{64, 1, kFusionSize, kFusionSize});
  CHECK(*std::min_element(full.data().begin(), full.data().end()) == doctest::Approx(0.0f));
  CHECK(*std::max_element(full.data().begin(), full.data().end()) == doctest::Approx(1.0f));
}

TEST_CASE("rotation") {
  const nn::Tensor eval = normalize_ct(ramp_volume({4, 16, 16}), SliceMode::FULL);
  CHECK(same(rotate_planes(eval, 0.0), eval));

  // 180 degrees about the plane center is an exact index flip.
  nn::Tensor t(nn::Shape{1, 1, 6, 6});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  const nn::Tensor r = rotate_planes(t, 180.0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(r.at(0, 0, y, x) == doctest::Approx(t.at(0, 0, 5 - y, 5 - x)).epsilon(1e-5));

  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const double a = sample_rotation_deg(rng);
    CHECK(std::abs(a) <= kMaxRotationDeg);
  }
}

TEST_CASE("CT path shares one rotation across slices") {
  const Volume3D v = ramp_volume({64, 32, 32});
  Rng a(5), b(5), c(5);
  const nn::Tensor train = preprocess_ct(v, SliceMode::TWO_SLICE, true, a);
  const double angle = sample_rotation_deg(b);
  CHECK(same(train, rotate_planes(normalize_ct(v, SliceMode::TWO_SLICE), angle)));
  CHECK(same(preprocess_ct(v, SliceMode::TWO_SLICE, true, c), train));
  Rng d(5), e(5);
  CHECK(same(preprocess_ct(v, SliceMode::FULL, false, d), normalize_ct(v, SliceMode::FULL)));
  CHECK(d() == e());
}
