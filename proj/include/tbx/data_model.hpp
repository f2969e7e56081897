#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tbx/common.hpp"

namespace tbx {

namespace fs = std::filesystem;

enum class Split { train, val, test };
enum class Task { identification, sequelae, types };
enum class Provenance { phantom, generated_sv, generated_b, external };

std::string_view to_string(Split split);
std::string_view to_string(Task task);
std::string_view to_string(Provenance provenance);
Split parse_split(std::string_view text);
Task parse_task(std::string_view text);
Provenance parse_provenance(std::string_view text);

/// Finding types, in manifest column order.
enum class Finding : std::size_t { granuloma = 0, cavitation = 1, calcification = 2 };
inline constexpr std::size_t kFindingCount = 3;

/// Binary disease label. A healthy label (tb = 0) carries no findings;
/// finding flags are independent of each other.
class DiseaseLabel {
 public:
  DiseaseLabel() = default;

  /// Throws InvalidArgument("label inconsistency ...") when a healthy label
  /// carries sequelae or finding flags.
  DiseaseLabel(bool tb, bool sequelae, std::array<bool, kFindingCount> types);

  static DiseaseLabel healthy() { return {}; }

  [[nodiscard]] bool tb() const { return tb_; }
  [[nodiscard]] bool sequelae() const { return sequelae_; }
  [[nodiscard]] bool has(Finding f) const {
    return types_[static_cast<std::size_t>(f)];
  }
  [[nodiscard]] const std::array<bool, kFindingCount>& types() const {
    return types_;
  }
  [[nodiscard]] bool any_finding() const;
  [[nodiscard]] bool is_healthy() const { return !tb_; }

  friend bool operator==(const DiseaseLabel&, const DiseaseLabel&) = default;

 private:
  bool tb_ = false;
  bool sequelae_ = false;
  std::array<bool, kFindingCount> types_{};
};

struct PatientRecord {
  std::string patient_id;
  std::optional<fs::path> pa_image;       // relative to the manifest directory
  std::optional<fs::path> lateral_image;  // relative to the manifest directory
  DiseaseLabel label;
  Split split = Split::train;

  friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

/// Row-major 2D grayscale image with intensities scaled to [0, 1] on load.
class ImagePlane2D {
 public:
  ImagePlane2D() = default;
  ImagePlane2D(int width, int height, std::vector<float> pixels,
               int bit_depth = 32);

  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int bit_depth() const { return bit_depth_; }
  [[nodiscard]] std::span<const float> pixels() const { return pixels_; }
  [[nodiscard]] float at(int row, int col) const {
    return pixels_[static_cast<std::size_t>(row) * width_ + col];
  }
  [[nodiscard]] bool empty() const { return pixels_.empty(); }

  friend bool operator==(const ImagePlane2D&, const ImagePlane2D&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int bit_depth_ = 32;
  std::vector<float> pixels_;
};

struct Dims3 {
  int depth = 0;
  int height = 0;
  int width = 0;

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(depth) * height * width;
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

std::string to_string(const Dims3& dims);

/// D x H x W voxel grid, depth-major. Provenance is fixed at construction.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims3 dims, std::vector<float> voxels, Provenance provenance);

  [[nodiscard]] const Dims3& dims() const { return dims_; }
  [[nodiscard]] Provenance provenance() const { return provenance_; }
  [[nodiscard]] std::span<const float> voxels() const { return voxels_; }
  [[nodiscard]] float at(int d, int h, int w) const {
    return voxels_[(static_cast<std::size_t>(d) * dims_.height + h) *
                       dims_.width + w];
  }
  /// Copy of the voxels with a different provenance tag.
  [[nodiscard]] Volume3D restamped(Provenance provenance) const {
    return {dims_, voxels_, provenance};
  }

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

 private:
  Dims3 dims_{};
  std::vector<float> voxels_;
  Provenance provenance_ = Provenance::external;
};

/// Raised for malformed manifest content; carries the 1-based file line.
class ManifestError : public Error {
 public:
  ManifestError(std::size_t line, std::string_view field,
                std::string_view problem);
  [[nodiscard]] std::size_t line() const { return line_; }
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

inline constexpr std::string_view kManifestHeader =
    "patient_id,pa_path,l_path,tb,sequelae,granuloma,cavitation,calcification,"
    "split";

struct Manifest {
  fs::path root;  // directory image paths are relative to
  std::vector<PatientRecord> records;

  [[nodiscard]] fs::path resolve(const fs::path& relative) const {
    return relative.is_absolute() ? relative : root / relative;
  }
};

Manifest load_manifest(const fs::path& path);
Manifest parse_manifest(std::string_view csv_text, fs::path root = {});
std::string manifest_to_csv(std::span<const PatientRecord> records);
void write_manifest(const fs::path& path, std::span<const PatientRecord> records);

struct CohortSplit {
  Task task = Task::identification;
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> val;
  std::vector<PatientRecord> test;

  [[nodiscard]] const std::vector<PatientRecord>& part(Split split) const;
};

/// True when a record carries the labels `task` needs.
bool eligible_for_task(const PatientRecord& record, Task task);

/// Keeps the records eligible for `task`; split membership comes from the
/// manifest. Throws InvalidArgument("cohort empty for task ...") if any of
/// the three splits ends up empty.
CohortSplit filter_cohort(std::span<const PatientRecord> records, Task task);

enum class ViewModality { PA, PA_L };

struct ViewSelection {
  fs::path first;                  // PA (or the sole available view)
  std::optional<fs::path> second;  // lateral, PA_L only
};

ViewSelection select_views(const PatientRecord& record, ViewModality modality,
                           Rng& rng);

/// Integer counts proportional to `proportions` that sum to `total`
/// (largest-remainder rounding; ties go to the lower index).
std::vector<std::size_t> largest_remainder(std::size_t total,
                                           std::span<const double> proportions);

/// Reassigns splits stratified by label, so every label combination is
/// divided by `ratios` (train, val, test). Seeded shuffle within strata.
std::vector<PatientRecord> assign_splits(std::vector<PatientRecord> records,
                                         std::array<double, 3> ratios,
                                         std::uint64_t seed);

}  // namespace tbx
