#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tbx/classifiers.hpp"
#include "tbx/ct_synthesis.hpp"
#include "tbx/training.hpp"

namespace tbx::evaluation {

enum class AccuracyMode { exact, per_label_mean };

/// exact: fraction of samples with every label right; per_label_mean:
/// fraction of right (sample, label) cells.
double accuracy(const std::vector<std::vector<int>>& predictions,
                const std::vector<std::vector<int>>& labels, AccuracyMode mode);

/// Percent change of `candidate` over `baseline`, unrounded.
double relative_improvement(double candidate, double baseline);

/// Two-decimal fixed notation used by reports ("7.50").
std::string format2(double value);

struct GeneratorSet {
  const synthesis::CTGenerator* sv = nullptr;
  const synthesis::CTGenerator* b = nullptr;

  /// Generator feeding `tag`, or nullptr for X-ray-only modalities. Throws
  /// when a CT modality has no bound generator.
  [[nodiscard]] const synthesis::CTGenerator* for_tag(classifiers::ModalityTag tag) const;
};

struct ExperimentConfig {
  Task task = Task::identification;
  classifiers::ModalityTag tag = classifiers::ModalityTag::XRAY_PA;
  std::optional<preprocessing::SliceMode> slice_mode;  // CT modalities only
  training::TrainConfig train;

  /// Throws InvalidArgument when a slice mode is given without CT or missing
  /// with CT.
  void validate() const;
  /// e.g. "ct_b+xray_two", "xray_pa".
  [[nodiscard]] std::string cell_name() const;
};

struct CellResult {
  ExperimentConfig config;
  double accuracy = 0.0;  // headline metric
  double accuracy_exact = 0.0;
  double accuracy_per_label = 0.0;
  training::TrainHistory history;
  std::uint64_t parameter_checksum = 0;
};

/// Trains on cohort.train/val and scores cohort.test. With `run_dir`, the
/// run directory (config.json, history.csv, best.ckpt) is written there.
CellResult run_experiment(const ExperimentConfig& config, const Manifest& manifest,
                          const CohortSplit& cohort, const GeneratorSet& generators,
                          const std::optional<fs::path>& run_dir = {});

struct TableRow {
  std::string label;
  classifiers::ModalityTag tag = classifiers::ModalityTag::XRAY_PA;
  std::optional<preprocessing::SliceMode> slice_mode;
  double accuracy = 0.0;
  double accuracy_exact = 0.0;
  std::optional<double> improvement;  // vs the baseline row; unset on it
  bool baseline = false;
};

struct ResultTable {
  Task task = Task::identification;
  std::vector<TableRow> rows;  // table row order, CT rows full before two
};

/// Cell list of the ablation matrix for `task`: ten cells for
/// identification, X-ray / CT / CT + X-ray for the other tasks.
std::vector<ExperimentConfig> matrix_cells(Task task, const training::TrainConfig& base,
                                           std::optional<int> batch_size);

/// Row label of a cell in the table of `task`.
std::string matrix_row_label(Task task, classifiers::ModalityTag tag);

struct MatrixOptions {
  std::uint64_t seed = 0;
  double learning_rate = 1e-4;
  int max_epochs = 100;
  int patience = 10;
  std::optional<int> batch_size;  // unset: per-modality default
  bool argmax = false;
  int jobs = 1;
  std::optional<fs::path> run_root;  // cell run dirs go to <run_root>/cells/
};

/// Cells use independent seeds derived from options.seed and share the
/// manifest's splits.
ResultTable run_experiment_matrix(Task task, const Manifest& manifest,
                                  const GeneratorSet& generators,
                                  const MatrixOptions& options);

/// Builds the table, baseline flags and improvements from finished cells.
ResultTable assemble_table(Task task, const std::vector<CellResult>& cells);

enum class ReportFormat { markdown, csv };

std::string render_report(const ResultTable& table, ReportFormat format);

inline constexpr std::string_view kReportCsvHeader =
    "row_label,slice_mode,accuracy,improvement_vs_xray_pct";

/// Inverse of the CSV rendering (accuracy and improvement as printed).
ResultTable parse_report_csv(std::string_view text, Task task);

struct MarkdownCell {
  std::string row_label;
  std::string column;  // "Accuracy", "Full CT" or "2-Slice CT"
  double value = 0.0;
  bool bold = false;
  bool underlined = false;
};

/// Accuracy cells of a rendered markdown report.
std::vector<MarkdownCell> parse_report_markdown(std::string_view text);

}  // namespace tbx::evaluation
