#pragma once

#include <span>
#include <vector>

#include "tbx/data_model.hpp"
#include "tbx/nn.hpp"

namespace tbx::preprocessing {

enum class SliceMode { FULL, TWO_SLICE };

std::string_view to_string(SliceMode mode);
SliceMode parse_slice_mode(std::string_view text);

inline constexpr int kXrayResize = 364;
inline constexpr int kXrayCrop = 320;
inline constexpr int kFusionSize = 128;
inline constexpr double kCropScaleMin = 0.8;
inline constexpr double kCropScaleMax = 1.0;
inline constexpr double kFlipProbability = 0.5;
inline constexpr double kMaxRotationDeg = 15.0;
inline constexpr int kBlurKernel = 5;
inline constexpr double kBlurSigma = 1.0;

/// Row-major single-channel grid.
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<float> values;
};

Grid to_grid(const ImagePlane2D& image);
nn::Tensor to_tensor(const Grid& grid);  // 1 x 1 x H x W

/// Bilinear resampling with half-pixel centers (edge samples clamp).
Grid resize_bilinear(const Grid& src, int out_height, int out_width);

/// Bilinear resampling of the sub-rectangle [top, top+h) x [left, left+w).
Grid resize_region(const Grid& src, int top, int left, int height, int width,
                   int out_height, int out_width);

/// Separable Gaussian blur with reflect-101 borders; the kernel is
/// normalized, so constant images are unchanged.
Grid gaussian_blur(const Grid& src, int kernel_size = kBlurKernel,
                   double sigma = kBlurSigma);

/// Zero-mean, unit-variance standardization. Zero variance yields zeros and
/// a warning.
void standardize(Grid& grid);

/// Min-max scaling to [0, 1]. A constant grid yields zeros and a warning.
void min_max_normalize(Grid& grid);

struct CropWindow {
  int top = 0, left = 0, height = 0, width = 0;
};

/// Random-resized-crop window over a square image of side `size`.
CropWindow sample_crop(int size, Rng& rng);

/// 2D X-ray path: 364x364 resize, random resized crop + flip (train) or
/// center crop (eval) to 320x320, then standardization. Returns 1x1x320x320.
nn::Tensor preprocess_xray_2d(const ImagePlane2D& image, bool train_mode, Rng& rng);

/// Fusion X-ray path: 128x128 resize, [0,1] min-max, 5x5 Gaussian blur.
/// Returns 1x1x128x128.
nn::Tensor preprocess_xray_fusion(const ImagePlane2D& image);

/// k consecutive slice indices centered at depth/2 (for k = 2:
/// depth/2 - 1 and depth/2).
std::vector<int> central_slices(int depth, int k);

/// Eval-mode CT path: axial slices resized to 128x128 and scaled by the
/// volume's global min/max. Returns S x 1 x 128 x 128.
nn::Tensor normalize_ct(const Volume3D& volume, SliceMode mode);

double sample_rotation_deg(Rng& rng);

/// Rotates every channel plane about its center by `degrees`; samples that
/// fall outside the plane are 0.
nn::Tensor rotate_planes(const nn::Tensor& stack, double degrees);

/// normalize_ct, plus one random rotation shared by all slices in train mode.
nn::Tensor preprocess_ct(const Volume3D& volume, SliceMode mode, bool train_mode,
                         Rng& rng);

}  // namespace tbx::preprocessing
