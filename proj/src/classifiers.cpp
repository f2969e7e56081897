#include "tbx/classifiers.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "tbx/image_io.hpp"

namespace tbx::classifiers {

using preprocessing::SliceMode;

std::string_view to_string(ModalityTag tag) {
  switch (tag) {
    case ModalityTag::XRAY_PA: return "xray_pa";
    case ModalityTag::XRAY_PA_L: return "xray_pa+l";
    case ModalityTag::CT_SV: return "ct_sv";
    case ModalityTag::CT_B: return "ct_b";
    case ModalityTag::CT_SV_XRAY: return "ct_sv+xray";
    case ModalityTag::CT_B_XRAY: return "ct_b+xray";
  }
  return "?";
}

ModalityTag parse_modality(std::string_view text) {
  for (ModalityTag t : kAllModalities) {
    if (to_string(t) == text) return t;
  }
  throw InvalidArgument("unknown modality '" + std::string(text) + "'");
}

std::string_view row_label(ModalityTag tag) {
  switch (tag) {
    case ModalityTag::XRAY_PA: return "X-ray (PA)";
    case ModalityTag::XRAY_PA_L: return "X-ray (PA) + (L)";
    case ModalityTag::CT_SV: return "CT (SV)";
    case ModalityTag::CT_B: return "CT (B)";
    case ModalityTag::CT_SV_XRAY: return "CT (SV) + X-ray";
    case ModalityTag::CT_B_XRAY: return "CT (B) + X-ray";
  }
  return "?";
}

bool uses_ct(ModalityTag tag) {
  return tag != ModalityTag::XRAY_PA && tag != ModalityTag::XRAY_PA_L;
}

bool uses_fused_xray(ModalityTag tag) {
  return tag == ModalityTag::CT_SV_XRAY || tag == ModalityTag::CT_B_XRAY;
}

bool uses_biplanar_ct(ModalityTag tag) {
  return tag == ModalityTag::CT_B || tag == ModalityTag::CT_B_XRAY;
}

int expected_channels(ModalityTag tag, SliceMode mode, int ct_depth) {
  if (!uses_ct(tag)) throw InvalidArgument("X-ray modalities have no channel stack");
  const int slices = mode == SliceMode::TWO_SLICE ? 2 : ct_depth;
  return slices + (uses_fused_xray(tag) ? 1 : 0);
}

nn::Tensor fuse_inputs(const nn::Tensor& ct_slices, const nn::Tensor& xray) {
  const nn::Shape a = ct_slices.shape(), b = xray.shape();
  if (a.d != 1 || b.d != 1 || b.c != 1 || a.h != b.h || a.w != b.w) {
    throw InvalidArgument("cannot fuse " + nn::to_string(a) + " with " +
                          nn::to_string(b) + ": spatial dimensions differ");
  }
  std::vector<float> out;
  out.reserve(ct_slices.size() + xray.size());
  out.insert(out.end(), ct_slices.data().begin(), ct_slices.data().end());
  out.insert(out.end(), xray.data().begin(), xray.data().end());
  return nn::Tensor(nn::Shape{a.c + 1, 1, a.h, a.w}, std::move(out));
}

namespace {

template <typename T>
void check_loss_args(std::span<const T> logits, std::span<const T> targets) {
  if (logits.empty() || logits.size() != targets.size()) {
    throw InvalidArgument("logits and targets must be nonempty and equally long");
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw InvalidArgument("non-finite logit");
    if (targets[i] != T(0) && targets[i] != T(1)) {
      throw InvalidArgument("targets must be 0 or 1");
    }
  }
}

template <typename T>
double bce_impl(std::span<const T> logits, std::span<const T> targets) {
  check_loss_args(logits, targets);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], t = targets[i];
    sum += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  return sum / static_cast<double>(logits.size());
}

template <typename T>
std::vector<double> bce_grad_impl(std::span<const T> logits, std::span<const T> targets) {
  check_loss_args(logits, targets);
  const double n = static_cast<double>(logits.size());
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    g[i] = (sigmoid(logits[i]) - targets[i]) / n;
  }
  return g;
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_with_logits(std::span<const float> logits, std::span<const float> targets) {
  return bce_impl(logits, targets);
}

double bce_with_logits(std::span<const double> logits, std::span<const double> targets) {
  return bce_impl(logits, targets);
}

std::vector<double> bce_with_logits_grad(std::span<const float> logits,
                                         std::span<const float> targets) {
  return bce_grad_impl(logits, targets);
}

std::vector<double> bce_with_logits_grad(std::span<const double> logits,
                                         std::span<const double> targets) {
  return bce_grad_impl(logits, targets);
}

std::string_view to_string(ArchitectureKind kind) {
  return kind == ArchitectureKind::multiview_2d ? "multiview_2d" : "slicestack_3d";
}

ArchitectureKind parse_architecture(std::string_view text) {
  if (text == "multiview_2d") return ArchitectureKind::multiview_2d;
  if (text == "slicestack_3d") return ArchitectureKind::slicestack_3d;
  throw InvalidArgument("unknown architecture '" + std::string(text) + "'");
}

ArchitectureKind architecture_for(ModalityTag tag) {
  return uses_ct(tag) ? ArchitectureKind::slicestack_3d : ArchitectureKind::multiview_2d;
}

// Multiview: one encoder per view slot, mean of the present embeddings,
// linear head. Slice stack: a single body ending in the head.
struct ClassifierModel::Net {
  std::vector<std::unique_ptr<nn::Sequential>> branches;
  std::unique_ptr<nn::Linear> head;
  std::vector<int> active;
  nn::Sequential body;
  bool volumetric = false;
  nn::Shape body_input;
};

namespace {

constexpr int kEmbedding = 32;

std::unique_ptr<nn::Sequential> view_encoder(const std::string& prefix) {
  auto seq = std::make_unique<nn::Sequential>();
  seq->add(std::make_unique<nn::AvgPool>(nn::Triple{1, 2, 2}))
      .add(nn::Conv::conv2d(1, 8, 3, 2, 1, prefix + ".conv1"))
      .add(std::make_unique<nn::ReLU>())
      .add(nn::Conv::conv2d(8, 16, 3, 2, 1, prefix + ".conv2"))
      .add(std::make_unique<nn::ReLU>())
      .add(nn::Conv::conv2d(16, kEmbedding / 2, 3, 2, 1, prefix + ".conv3"))
      .add(std::make_unique<nn::ReLU>())
      .add(std::make_unique<nn::GlobalAvgMaxPool>());
  return seq;
}

}  // namespace

ClassifierModel::ClassifierModel(ArchitectureKind kind, int n_outputs, int input_channels)
    : kind_(kind),
      n_outputs_(n_outputs),
      input_channels_(input_channels),
      net_(std::make_unique<Net>()) {
  if (n_outputs < 1) throw InvalidArgument("classifier needs at least one output");
  if (kind == ArchitectureKind::multiview_2d) {
    if (input_channels < 1 || input_channels > 2) {
      throw InvalidArgument("multiview_2d supports 1 or 2 views, got " +
                            std::to_string(input_channels));
    }
    for (int v = 0; v < input_channels; ++v) {
      net_->branches.push_back(view_encoder("view" + std::to_string(v)));
    }
    net_->head = std::make_unique<nn::Linear>(kEmbedding, n_outputs, "head");
    return;
  }
  if (input_channels < 1) {
    throw InvalidArgument("slicestack_3d needs at least one channel");
  }
  auto& b = net_->body;
  if (input_channels <= kMaxPlanarChannels) {
    b.add(std::make_unique<nn::AvgPool>(nn::Triple{1, 2, 2}))
        .add(nn::Conv::conv2d(input_channels, 32, 3, 2, 1, "conv1"))
        .add(std::make_unique<nn::ReLU>())
        .add(nn::Conv::conv2d(32, 64, 3, 2, 1, "conv2"))
        .add(std::make_unique<nn::ReLU>())
        .add(nn::Conv::conv2d(64, 64, 3, 2, 1, "conv3"))
        .add(std::make_unique<nn::ReLU>())
        .add(std::make_unique<nn::GlobalAvgMaxPool>())
        .add(std::make_unique<nn::Linear>(128, n_outputs, "head"));
  } else {
    // Channels become the depth axis of a single-channel volume.
    net_->volumetric = true;
    b.add(std::make_unique<nn::AvgPool>(nn::Triple{1, 4, 4}))
        .add(nn::Conv::conv3d(1, 8, 3, 2, 1, "conv1"))
        .add(std::make_unique<nn::ReLU>())
        .add(nn::Conv::conv3d(8, 16, 3, 2, 1, "conv2"))
        .add(std::make_unique<nn::ReLU>())
        .add(nn::Conv::conv3d(16, 16, 3, 2, 1, "conv3"))
        .add(std::make_unique<nn::ReLU>())
        .add(std::make_unique<nn::GlobalAvgMaxPool>())
        .add(std::make_unique<nn::Linear>(32, n_outputs, "head"));
  }
}

ClassifierModel::~ClassifierModel() = default;
ClassifierModel::ClassifierModel(ClassifierModel&&) noexcept = default;
ClassifierModel& ClassifierModel::operator=(ClassifierModel&&) noexcept = default;

std::vector<float> ClassifierModel::forward(const ModelInput& input) {
  Net& n = *net_;
  nn::Tensor out;
  if (kind_ == ArchitectureKind::multiview_2d) {
    n.active.clear();
    std::vector<float> fused(kEmbedding, 0.0f);
    for (int v = 0; v < input_channels_; ++v) {
      const auto& view = input.views[static_cast<std::size_t>(v)];
      if (!view) continue;
      const nn::Shape s = view->shape();
      if (s.c != 1 || s.d != 1 || s.h < 32 || s.w < 32) {
        throw InvalidArgument("view tensor must be 1x1xHxW with H, W >= 32, got " +
                              nn::to_string(s));
      }
      const nn::Tensor e = n.branches[static_cast<std::size_t>(v)]->forward(*view);
      for (int i = 0; i < kEmbedding; ++i) fused[static_cast<std::size_t>(i)] += e[static_cast<std::size_t>(i)];
      n.active.push_back(v);
    }
    if (n.active.empty()) throw InvalidArgument("no view available for the classifier");
    const float inv = 1.0f / static_cast<float>(n.active.size());
    for (float& f : fused) f *= inv;
    out = n.head->forward(nn::Tensor(nn::Shape{kEmbedding}, std::move(fused)));
  } else {
    const nn::Shape s = input.channels.shape();
    if (s.c != input_channels_ || s.d != 1 || s.h < 16 || s.w < 16) {
      throw InvalidArgument("expected " + std::to_string(input_channels_) +
                            "x1xHxW input, got " + nn::to_string(s));
    }
    n.body_input = n.volumetric ? nn::Shape{1, s.c, s.h, s.w} : s;
    out = n.body.forward(n.volumetric ? input.channels.reshaped(n.body_input)
                                      : input.channels);
  }
  return {out.data().begin(), out.data().end()};
}

void ClassifierModel::backward(std::span<const double> grad_logits) {
  if (grad_logits.size() != static_cast<std::size_t>(n_outputs_)) {
    throw InvalidArgument("gradient length does not match the outputs");
  }
  nn::Tensor g(nn::Shape{n_outputs_});
  for (int i = 0; i < n_outputs_; ++i) {
    g[static_cast<std::size_t>(i)] = static_cast<float>(grad_logits[static_cast<std::size_t>(i)]);
  }
  Net& n = *net_;
  if (kind_ == ArchitectureKind::multiview_2d) {
    nn::Tensor ge = n.head->backward(g);
    const float inv = 1.0f / static_cast<float>(n.active.size());
    for (float& v : ge.data()) v *= inv;
    for (int v : n.active) n.branches[static_cast<std::size_t>(v)]->backward(ge);
  } else {
    n.body.backward(g);
  }
}

std::vector<nn::Parameter*> ClassifierModel::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& b : net_->branches) b->collect_parameters(out);
  if (net_->head) net_->head->collect_parameters(out);
  net_->body.collect_parameters(out);
  return out;
}

std::uint64_t ClassifierModel::checksum() { return nn::checksum(parameters()); }

ClassifierModel build_classifier(ArchitectureKind kind, int n_outputs, int input_channels,
                                 std::uint64_t seed) {
  ClassifierModel model(kind, n_outputs, input_channels);
  Rng rng(derive_seed(seed, 0x636c6173));
  auto& net = *model.net_;
  for (auto& b : net.branches) nn::init_layers(*b, rng);
  if (net.head) net.head->init(rng);
  nn::init_layers(net.body, rng);
  return model;
}

Prediction predict_from_logits(std::span<const float> logits, bool argmax) {
  Prediction p;
  p.probabilities.reserve(logits.size());
  for (float z : logits) {
    if (!std::isfinite(z)) throw InvalidArgument("non-finite logit");
    p.probabilities.push_back(sigmoid(z));
  }
  p.labels.assign(logits.size(), 0);
  if (argmax && !logits.empty()) {
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    p.labels[static_cast<std::size_t>(best)] = 1;
  } else {
    for (std::size_t i = 0; i < logits.size(); ++i) {
      p.labels[i] = p.probabilities[i] >= 0.5 ? 1 : 0;
    }
  }
  return p;
}

Prediction predict(ClassifierModel& model, const ModelInput& input, bool argmax) {
  return predict_from_logits(model.forward(input), argmax);
}

void save_classifier(const fs::path& path, ClassifierModel& model) {
  nlohmann::ordered_json header;
  header["kind"] = to_string(model.kind());
  header["n_outputs"] = model.n_outputs();
  header["input_channels"] = model.input_channels();
  header["format_version"] = 1;
  io::write_checkpoint(path, {header.dump(), nn::flatten_values(model.parameters())});
}

ClassifierModel load_classifier(const fs::path& path) {
  const io::Checkpoint ck = io::read_checkpoint(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ck.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad classifier checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("format_version", 0) != 1) {
    throw IoError("unsupported classifier checkpoint version in " + path.string());
  }
  ClassifierModel model(parse_architecture(header.at("kind").get<std::string>()),
                        header.at("n_outputs").get<int>(),
                        header.at("input_channels").get<int>());
  nn::load_values(model.parameters(), ck.values);
  return model;
}

}  // namespace tbx::classifiers
