#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tbx/data_model.hpp"
#include "tbx/nn.hpp"

namespace tbx::synthesis {

enum class GeneratorMode { SV, B };

std::string_view to_string(GeneratorMode mode);  // "SV" / "B"
GeneratorMode parse_generator_mode(std::string_view text);  // case-insensitive
Provenance provenance_for(GeneratorMode mode);

/// Side of the square [0,1] image the toy generator encodes.
inline constexpr int kGeneratorInputSize = 128;

struct GeneratorInput {
  std::string patient_id;  // only needed by generators keyed on records
  ImagePlane2D pa;
  std::optional<ImagePlane2D> lateral;
};

/// X-ray to CT mapping. SV generators ignore the lateral view.
class CTGenerator {
 public:
  virtual ~CTGenerator() = default;
  [[nodiscard]] virtual GeneratorMode mode() const = 0;
  [[nodiscard]] virtual Dims3 output_dims() const = 0;
  /// Deterministic for fixed parameters and inputs; callable concurrently.
  [[nodiscard]] virtual Volume3D generate(const GeneratorInput& input) const = 0;
};

/// Runs `gen` and enforces the output contract: dims, voxels in [0, 1],
/// provenance per mode. B mode without a lateral view is an error.
Volume3D synthesize_ct(const CTGenerator& gen, const ImagePlane2D& pa,
                       const std::optional<ImagePlane2D>& lateral,
                       const std::string& patient_id = {});

/// Strided-conv encoder per view, coarse 3D decoder with trilinear
/// upsampling, and a learned back-projection of the input views.
class ToyGenerator : public CTGenerator {
 public:
  ToyGenerator(GeneratorMode mode, Dims3 output_dims, std::uint64_t seed);
  ~ToyGenerator() override;
  ToyGenerator(ToyGenerator&&) noexcept;
  ToyGenerator& operator=(ToyGenerator&&) noexcept;

  [[nodiscard]] GeneratorMode mode() const override;
  [[nodiscard]] Dims3 output_dims() const override;
  [[nodiscard]] Volume3D generate(const GeneratorInput& input) const override;

  std::vector<nn::Parameter*> parameters();
  std::uint64_t checksum();

  void save(const fs::path& path);
  static ToyGenerator load(const fs::path& path);

  struct Impl;
  Impl& impl() { return *impl_; }

 private:
  std::unique_ptr<Impl> impl_;
};

struct TrainingPair {
  std::string patient_id;
  ImagePlane2D pa;
  ImagePlane2D lateral;
  Volume3D volume;  // ground truth
};

struct ToyGeneratorConfig {
  GeneratorMode mode = GeneratorMode::B;
  int epochs = 30;
  double learning_rate = 1e-3;
  int batch_size = 4;
  double consistency_weight = 0.1;
  double adversarial_weight = 0.0;  // LSGAN term, off by default
  std::uint64_t seed = 0;
};

struct ToyGeneratorFit {
  ToyGenerator generator;
  std::vector<double> epoch_loss;
  double initial_mse = 0.0;
  double final_mse = 0.0;
};

inline constexpr std::size_t kMinTrainingPairs = 16;

/// Minimizes voxel MSE + consistency_weight * MSE(drr_project(pred), PA).
ToyGeneratorFit train_toy_generator(std::span<const TrainingPair> pairs,
                                    const ToyGeneratorConfig& config);

/// Mean per-voxel squared error of `gen` over `pairs`.
double reconstruction_mse(const CTGenerator& gen, std::span<const TrainingPair> pairs);

/// Pearson correlation of the volume's PA projection with `pa`; 0 (with a
/// warning) when either image is constant.
double projection_consistency(const Volume3D& volume, const ImagePlane2D& pa);

/// Serves precomputed volumes from `<dir>/<patient_id>.vol`.
class DiskGenerator : public CTGenerator {
 public:
  DiskGenerator(fs::path dir, GeneratorMode mode);

  [[nodiscard]] GeneratorMode mode() const override { return mode_; }
  [[nodiscard]] Dims3 output_dims() const override { return dims_; }
  [[nodiscard]] Volume3D generate(const GeneratorInput& input) const override;
  [[nodiscard]] const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  GeneratorMode mode_;
  Dims3 dims_{};
};

/// Checkpoint file -> ToyGenerator; directory -> DiskGenerator in `mode`.
std::unique_ptr<CTGenerator> load_generator(const fs::path& path,
                                            std::optional<GeneratorMode> mode = {});

}  // namespace tbx::synthesis
