#include "tbx/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace tbx::preprocessing {

std::string_view to_string(SliceMode mode) {
  return mode == SliceMode::FULL ? "full" : "two";
}

SliceMode parse_slice_mode(std::string_view text) {
  if (text == "full" || text == "FULL") return SliceMode::FULL;
  if (text == "two" || text == "TWO_SLICE" || text == "2") return SliceMode::TWO_SLICE;
  throw InvalidArgument("unknown slice mode '" + std::string(text) + "'");
}

Grid to_grid(const ImagePlane2D& image) {
  return {image.height(), image.width(),
          std::vector<float>(image.pixels().begin(), image.pixels().end())};
}

nn::Tensor to_tensor(const Grid& grid) {
  return nn::Tensor(nn::Shape{1, 1, grid.height, grid.width}, grid.values);
}

namespace {

struct Tap {
  int i0, i1;
  float frac;
};

// Source taps for each output index; sampling stays inside [lo, lo+n).
std::vector<Tap> taps(int lo, int n, int out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(n) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, n - 1);
    t[static_cast<std::size_t>(o)] = {lo + i0, lo + i1, static_cast<float>(s - i0)};
  }
  return t;
}

}  // namespace

Grid resize_region(const Grid& src, int top, int left, int height, int width,
                   int out_height, int out_width) {
  if (src.values.empty() || height <= 0 || width <= 0 || out_height <= 0 ||
      out_width <= 0) {
    throw InvalidArgument("resize needs a nonempty source and target");
  }
  if (top < 0 || left < 0 || top + height > src.height || left + width > src.width) {
    throw InvalidArgument("resize region outside the source image");
  }
  const auto ty = taps(top, height, out_height);
  const auto tx = taps(left, width, out_width);
  Grid out{out_height, out_width,
           std::vector<float>(static_cast<std::size_t>(out_height) * out_width)};
  for (int y = 0; y < out_height; ++y) {
    const Tap& a = ty[static_cast<std::size_t>(y)];
    const float* r0 = src.values.data() + static_cast<std::size_t>(a.i0) * src.width;
    const float* r1 = src.values.data() + static_cast<std::size_t>(a.i1) * src.width;
    float* o = out.values.data() + static_cast<std::size_t>(y) * out_width;
    for (int x = 0; x < out_width; ++x) {
      const Tap& b = tx[static_cast<std::size_t>(x)];
      const float top_v = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
      const float bot_v = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
      o[x] = top_v + (bot_v - top_v) * a.frac;
    }
  }
  return out;
}

Grid resize_bilinear(const Grid& src, int out_height, int out_width) {
  return resize_region(src, 0, 0, src.height, src.width, out_height, out_width);
}

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

Grid gaussian_blur(const Grid& src, int kernel_size, double sigma) {
  if (kernel_size <= 0 || kernel_size % 2 == 0 || sigma <= 0) {
    throw InvalidArgument("blur kernel must be odd and sigma positive");
  }
  const int r = kernel_size / 2;
  std::vector<double> k(static_cast<std::size_t>(kernel_size));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= sum;

  const int h = src.height, w = src.width;
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        acc += k[static_cast<std::size_t>(i + r)] *
               src.values[static_cast<std::size_t>(y) * w + reflect101(x + i, w)];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  Grid out{h, w, std::vector<float>(tmp.size())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        acc += k[static_cast<std::size_t>(i + r)] *
               tmp[static_cast<std::size_t>(reflect101(y + i, h)) * w + x];
      }
      out.values[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
  return out;
}

void standardize(Grid& grid) {
  double sum = 0.0;
  for (float v : grid.values) sum += v;
  const double mean = sum / static_cast<double>(grid.values.size());
  double sq = 0.0;
  for (float v : grid.values) sq += (v - mean) * (v - mean);
  double sd = std::sqrt(sq / static_cast<double>(grid.values.size()));
  if (sd < 1e-8) {
    warn("zero-variance image; standardized output is all zeros");
    sd = 1e-8;
  }
  for (float& v : grid.values) v = static_cast<float>((v - mean) / sd);
}

void min_max_normalize(Grid& grid) {
  const auto [lo_it, hi_it] = std::minmax_element(grid.values.begin(), grid.values.end());
  const float lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    warn("constant image; [0,1] normalization yields all zeros");
    std::fill(grid.values.begin(), grid.values.end(), 0.0f);
    return;
  }
  const float inv = 1.0f / (hi - lo);
  for (float& v : grid.values) v = std::clamp((v - lo) * inv, 0.0f, 1.0f);
}

CropWindow sample_crop(int size, Rng& rng) {
  const double area = static_cast<double>(size) * size;
  std::uniform_real_distribution<double> scale(kCropScaleMin, kCropScaleMax);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0),
                                                   std::log(4.0 / 3.0));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= size && h <= size) {
      const int top = std::uniform_int_distribution<int>(0, size - h)(rng);
      const int left = std::uniform_int_distribution<int>(0, size - w)(rng);
      return {top, left, h, w};
    }
  }
  return {0, 0, size, size};
}

nn::Tensor preprocess_xray_2d(const ImagePlane2D& image, bool train_mode, Rng& rng) {
  if (image.empty()) throw InvalidArgument("empty X-ray image");
  const Grid resized = resize_bilinear(to_grid(image), kXrayResize, kXrayResize);
  Grid out;
  if (train_mode) {
    const CropWindow c = sample_crop(kXrayResize, rng);
    out = resize_region(resized, c.top, c.left, c.height, c.width, kXrayCrop, kXrayCrop);
    if (std::bernoulli_distribution(kFlipProbability)(rng)) {
      for (int y = 0; y < kXrayCrop; ++y) {
        auto row = out.values.begin() + static_cast<std::ptrdiff_t>(y) * kXrayCrop;
        std::reverse(row, row + kXrayCrop);
      }
    }
  } else {
    const int off = (kXrayResize - kXrayCrop) / 2;
    out = resize_region(resized, off, off, kXrayCrop, kXrayCrop, kXrayCrop, kXrayCrop);
  }
  standardize(out);
  return to_tensor(out);
}

nn::Tensor preprocess_xray_fusion(const ImagePlane2D& image) {
  if (image.empty()) throw InvalidArgument("empty X-ray image");
  Grid g = resize_bilinear(to_grid(image), kFusionSize, kFusionSize);
  min_max_normalize(g);
  return to_tensor(gaussian_blur(g));
}

std::vector<int> central_slices(int depth, int k) {
  if (k <= 0) throw InvalidArgument("slice count must be positive");
  if (depth < k) {
    throw InvalidArgument("depth " + std::to_string(depth) + " has fewer than " +
                          std::to_string(k) + " slices");
  }
  const int start = depth / 2 - k / 2;
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = start + i;
  return out;
}

nn::Tensor normalize_ct(const Volume3D& volume, SliceMode mode) {
  const auto [D, H, W] = volume.dims();
  std::vector<int> slices;
  if (mode == SliceMode::TWO_SLICE) {
    slices = central_slices(D, 2);
  } else {
    slices.resize(static_cast<std::size_t>(D));
    for (int d = 0; d < D; ++d) slices[static_cast<std::size_t>(d)] = d;
  }
  const auto vox = volume.voxels();
  const auto [lo_it, hi_it] = std::minmax_element(vox.begin(), vox.end());
  const float lo = *lo_it, hi = *hi_it;
  const bool constant = !(hi > lo);
  if (constant) warn("constant CT volume; normalized slices are all zeros");

  const int S = static_cast<int>(slices.size());
  nn::Tensor out(nn::Shape{S, 1, kFusionSize, kFusionSize});
  const std::size_t plane = static_cast<std::size_t>(kFusionSize) * kFusionSize;
  for (int s = 0; s < S; ++s) {
    if (constant) continue;
    const auto begin = vox.begin() + static_cast<std::ptrdiff_t>(slices[static_cast<std::size_t>(s)]) * H * W;
    Grid slice{H, W, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(H) * W)};
    const Grid r = (H == kFusionSize && W == kFusionSize)
                       ? std::move(slice)
                       : resize_bilinear(slice, kFusionSize, kFusionSize);
    const float inv = 1.0f / (hi - lo);
    float* dst = out.data().data() + static_cast<std::size_t>(s) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = std::clamp((r.values[i] - lo) * inv, 0.0f, 1.0f);
    }
  }
  return out;
}

double sample_rotation_deg(Rng& rng) {
  return std::uniform_real_distribution<double>(-kMaxRotationDeg, kMaxRotationDeg)(rng);
}

nn::Tensor rotate_planes(const nn::Tensor& stack, double degrees) {
  const nn::Shape s = stack.shape();
  nn::Tensor out(s);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (s.h - 1) / 2.0, cx = (s.w - 1) / 2.0;
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const int planes = s.c * s.d;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      // Inverse map: output pixel -> source location.
      const double dy = y - cy, dx = x - cx;
      double sx = cs * dx + sn * dy + cx;
      double sy = -sn * dx + cs * dy + cy;
      // Round-off at exact multiples of 90 degrees must not drop border pixels.
      constexpr double kEdge = 1e-9;
      if (sx < -kEdge || sy < -kEdge || sx > s.w - 1 + kEdge || sy > s.h - 1 + kEdge) continue;
      sx = std::clamp(sx, 0.0, s.w - 1.0);
      sy = std::clamp(sy, 0.0, s.h - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, s.w - 1), y1 = std::min(y0 + 1, s.h - 1);
      const auto fx = static_cast<float>(sx - x0), fy = static_cast<float>(sy - y0);
      for (int p = 0; p < planes; ++p) {
        const float* src = stack.data().data() + static_cast<std::size_t>(p) * plane;
        const float a = src[static_cast<std::size_t>(y0) * s.w + x0];
        const float b = src[static_cast<std::size_t>(y0) * s.w + x1];
        const float c = src[static_cast<std::size_t>(y1) * s.w + x0];
        const float d = src[static_cast<std::size_t>(y1) * s.w + x1];
        const float top = a + (b - a) * fx;
        const float bot = c + (d - c) * fx;
        out.data()[static_cast<std::size_t>(p) * plane +
                   static_cast<std::size_t>(y) * s.w + x] = top + (bot - top) * fy;
      }
    }
  }
  return out;
}

nn::Tensor preprocess_ct(const Volume3D& volume, SliceMode mode, bool train_mode,
                         Rng& rng) {
  nn::Tensor stack = normalize_ct(volume, mode);
  if (train_mode) stack = rotate_planes(stack, sample_rotation_deg(rng));
  return stack;
}

}  // namespace tbx::preprocessing
