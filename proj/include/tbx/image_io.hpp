#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tbx/data_model.hpp"

namespace tbx::io {

/// Reads an 8- or 16-bit PNG as grayscale, scaled to [0, 1]. Color inputs are
/// converted to luminance and alpha is dropped.
ImagePlane2D read_png(const fs::path& path);

/// Writes a 16-bit grayscale PNG; values are clamped to [0, 1] and scaled by
/// 65535.
void write_png16(const fs::path& path, const ImagePlane2D& image);

/// Writes `<path>` (little-endian float32, depth-major) and `<path>.json`.
void write_volume(const fs::path& path, const Volume3D& volume);
Volume3D read_volume(const fs::path& path);

/// Binary blob preceded by a single JSON header line.
struct Checkpoint {
  std::string header_json;
  std::vector<float> values;
};

void write_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const fs::path& path);

}  // namespace tbx::io
