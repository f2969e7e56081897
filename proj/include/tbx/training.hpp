#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbx/classifiers.hpp"
#include "tbx/ct_synthesis.hpp"
#include "tbx/data_model.hpp"
#include "tbx/preprocessing.hpp"

namespace tbx::training {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 1;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;
  bool argmax = false;  // single-label decoding for multi-output tasks

  /// Batch size 1 for the 2D X-ray path, 20 for CT and fusion inputs.
  static TrainConfig defaults_for(classifiers::ModalityTag tag);
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // 1-based; 0 before training
};

int output_count(Task task);

/// identification -> (tb); sequelae -> (sequelae), tb records only;
/// types -> (granuloma, cavitation, calcification).
std::vector<float> target_for_task(const DiseaseLabel& label, Task task);

/// Turns manifest records into classifier inputs for one modality. Eval
/// inputs are computed once per record and cached; train inputs apply the
/// random augmentation on top.
class InputPipeline {
 public:
  /// `generator` must be set exactly when the modality uses CT, and
  /// `slice_mode` likewise.
  InputPipeline(const Manifest& manifest, classifiers::ModalityTag tag,
                std::optional<preprocessing::SliceMode> slice_mode,
                const synthesis::CTGenerator* generator);

  [[nodiscard]] classifiers::ModalityTag tag() const { return tag_; }
  [[nodiscard]] classifiers::ArchitectureKind kind() const;
  /// View slots (2D path) or stack channels (CT path).
  [[nodiscard]] int input_channels() const;

  const classifiers::ModelInput& eval_input(const PatientRecord& record);
  classifiers::ModelInput train_input(const PatientRecord& record, Rng& rng);

 private:
  struct Cached {
    std::array<std::optional<ImagePlane2D>, 2> raw_views;
    classifiers::ModelInput eval;
  };
  const Cached& cached(const PatientRecord& record);

  const Manifest& manifest_;
  classifiers::ModalityTag tag_;
  std::optional<preprocessing::SliceMode> slice_mode_;
  const synthesis::CTGenerator* generator_;
  std::map<std::string, Cached> cache_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy_exact = 0.0;
  double accuracy_per_label = 0.0;
  std::vector<std::vector<int>> predictions;
  std::vector<std::vector<int>> targets;

  /// exact for single-output tasks, per-label mean for types.
  [[nodiscard]] double headline(Task task) const;
};

EvalResult evaluate(classifiers::ClassifierModel& model,
                    std::span<const PatientRecord> records, Task task,
                    InputPipeline& pipeline, bool argmax = false);

/// Adam with early stopping on validation loss; the model ends with the
/// parameters of the best epoch.
TrainHistory train(classifiers::ClassifierModel& model, const CohortSplit& cohort,
                   Task task, const TrainConfig& config, InputPipeline& pipeline);

std::string history_csv(const TrainHistory& history);

/// Writes config.json, history.csv and best.ckpt into `dir`.
void write_run_dir(const fs::path& dir, const nlohmann::ordered_json& config,
                   const TrainHistory& history, classifiers::ClassifierModel& model);

}  // namespace tbx::training
