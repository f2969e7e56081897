#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tbx/data_model.hpp"

namespace tbx::phantom {

// Fixed intensity model. Offsets are relative to the lung baseline.
inline constexpr float kBodyOffset = 0.1f;
inline constexpr float kGranulomaOffset = 0.7f;
inline constexpr float kCavityOffset = -0.3f;
inline constexpr float kCalcificationOffset = 0.7f;
inline constexpr float kStreakOffset = 0.2f;

struct PhantomSpec {
  Dims3 dims{64, 128, 128};
  float lung_baseline = 0.3f;
  std::array<bool, kFindingCount> findings{};  // all false means healthy
  bool sequelae = false;
  float noise_sigma = 0.02f;
  std::uint64_t seed = 0;

  [[nodiscard]] bool healthy() const;
  /// Throws InvalidArgument on an inconsistent spec.
  void validate() const;
};

struct Ellipsoid {
  double cd = 0, ch = 0, cw = 0;  // center, voxel coordinates
  double rd = 1, rh = 1, rw = 1;  // semi-axes

  [[nodiscard]] bool contains(double d, double h, double w) const;
};

enum class FindingShape { ball, shell, flecks };

struct PlacedFinding {
  Finding kind = Finding::granuloma;
  FindingShape shape = FindingShape::ball;
  int lung = 0;
  double cd = 0, ch = 0, cw = 0;
  double radius = 0;
};

/// Geometry actually drawn; lets tests locate lungs and findings.
struct PhantomLayout {
  Ellipsoid body;
  std::array<Ellipsoid, 2> lungs;
  std::vector<PlacedFinding> findings;
  double lung_shrink = 1.0;  // lung-volume factor, < 1 for sequelae
  int streaks = 0;

  [[nodiscard]] bool in_lung(int d, int h, int w) const;
};

struct Phantom {
  Volume3D volume;
  DiseaseLabel label;
  PhantomLayout layout;
};

Phantom generate_phantom(const PhantomSpec& spec);

enum class ProjectionAxis {
  depth,  // PA view, H x W image
  width,  // lateral view, H x D image
};

/// Mean-intensity projection along `axis`.
ImagePlane2D drr_project(const Volume3D& volume, ProjectionAxis axis);

/// Corpus classes: healthy, granuloma, cavitation, calcification,
/// mixed (two random findings), sequelae (healed, one random finding),
/// tb (one random active finding).
inline const std::vector<std::string>& corpus_class_names() {
  static const std::vector<std::string> names = {
      "healthy", "granuloma", "cavitation", "calcification",
      "mixed",   "sequelae",  "tb"};
  return names;
}

using ClassMix = std::vector<std::pair<std::string, double>>;

ClassMix default_class_mix();

struct CorpusOptions {
  std::size_t n = 300;
  ClassMix class_mix = default_class_mix();
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;
  fs::path out_dir;
  Dims3 dims{64, 128, 128};
  float lung_baseline = 0.3f;
  float noise_sigma = 0.02f;
};

/// Writes vol/<id>.vol(+.json), img/<id>_pa.png, img/<id>_l.png and
/// manifest.csv under out_dir. Returns the manifest path.
fs::path build_phantom_corpus(const CorpusOptions& options);

/// Ground-truth volume path for a corpus record.
fs::path corpus_volume_path(const fs::path& corpus_dir,
                            const std::string& patient_id);

}  // namespace tbx::phantom
