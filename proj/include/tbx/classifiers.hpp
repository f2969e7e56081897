#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tbx/nn.hpp"
#include "tbx/preprocessing.hpp"

namespace tbx::classifiers {

enum class ModalityTag { XRAY_PA, XRAY_PA_L, CT_SV, CT_B, CT_SV_XRAY, CT_B_XRAY };

inline constexpr std::array<ModalityTag, 6> kAllModalities = {
    ModalityTag::XRAY_PA, ModalityTag::XRAY_PA_L,  ModalityTag::CT_SV,
    ModalityTag::CT_B,    ModalityTag::CT_SV_XRAY, ModalityTag::CT_B_XRAY};

/// Command-line name: xray_pa, xray_pa+l, ct_sv, ct_b, ct_sv+xray, ct_b+xray.
std::string_view to_string(ModalityTag tag);
ModalityTag parse_modality(std::string_view text);
/// Row label as printed in identification tables, e.g. "CT (B) + X-ray".
std::string_view row_label(ModalityTag tag);

bool uses_ct(ModalityTag tag);
bool uses_fused_xray(ModalityTag tag);
bool uses_biplanar_ct(ModalityTag tag);

/// Channel count of the 128x128 stack for a CT modality.
int expected_channels(ModalityTag tag, preprocessing::SliceMode mode, int ct_depth);

struct ModelInput {
  ModalityTag tag = ModalityTag::XRAY_PA;
  /// 2D path: 1x1x320x320 per view slot (0 = PA, 1 = lateral).
  std::array<std::optional<nn::Tensor>, 2> views;
  /// CT/fusion path: C x 1 x 128 x 128.
  nn::Tensor channels;
};

/// Channel concatenation, CT slices first and the X-ray last.
nn::Tensor fuse_inputs(const nn::Tensor& ct_slices, const nn::Tensor& xray);

/// Mean binary cross entropy on logits, in the overflow-free form.
double bce_with_logits(std::span<const float> logits, std::span<const float> targets);
double bce_with_logits(std::span<const double> logits, std::span<const double> targets);

/// d(mean loss)/d(logits) = (sigmoid(z) - t) / n.
std::vector<double> bce_with_logits_grad(std::span<const float> logits,
                                         std::span<const float> targets);
std::vector<double> bce_with_logits_grad(std::span<const double> logits,
                                         std::span<const double> targets);

double sigmoid(double z);

enum class ArchitectureKind { multiview_2d, slicestack_3d };

std::string_view to_string(ArchitectureKind kind);
ArchitectureKind parse_architecture(std::string_view text);
ArchitectureKind architecture_for(ModalityTag tag);

/// Slice stacks with at most this many channels use the 2D network.
inline constexpr int kMaxPlanarChannels = 4;

class ClassifierModel {
 public:
  ClassifierModel(ArchitectureKind kind, int n_outputs, int input_channels);
  ~ClassifierModel();
  ClassifierModel(ClassifierModel&&) noexcept;
  ClassifierModel& operator=(ClassifierModel&&) noexcept;

  [[nodiscard]] ArchitectureKind kind() const { return kind_; }
  [[nodiscard]] int n_outputs() const { return n_outputs_; }
  /// View slots for multiview_2d, stack channels for slicestack_3d.
  [[nodiscard]] int input_channels() const { return input_channels_; }

  /// Logits; caches activations for a following backward().
  std::vector<float> forward(const ModelInput& input);
  void backward(std::span<const double> grad_logits);

  std::vector<nn::Parameter*> parameters();
  std::uint64_t checksum();

 private:
  friend ClassifierModel build_classifier(ArchitectureKind, int, int, std::uint64_t);
  struct Net;
  ArchitectureKind kind_;
  int n_outputs_;
  int input_channels_;
  std::unique_ptr<Net> net_;
};

/// Throws InvalidArgument for unsupported kind/shape combinations.
ClassifierModel build_classifier(ArchitectureKind kind, int n_outputs,
                                 int input_channels, std::uint64_t seed);

struct Prediction {
  std::vector<double> probabilities;
  std::vector<int> labels;
};

/// Thresholds at 0.5, or one-hot at the largest logit with `argmax`.
Prediction predict(ClassifierModel& model, const ModelInput& input, bool argmax = false);
Prediction predict_from_logits(std::span<const float> logits, bool argmax = false);

void save_classifier(const fs::path& path, ClassifierModel& model);
ClassifierModel load_classifier(const fs::path& path);

}  // namespace tbx::classifiers
