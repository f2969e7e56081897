#include "tbx/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "tbx/evaluation.hpp"
#include "tbx/image_io.hpp"

namespace tbx::training {

using classifiers::ModalityTag;
using classifiers::ModelInput;

TrainConfig TrainConfig::defaults_for(ModalityTag tag) {
  TrainConfig c;
  c.batch_size = classifiers::uses_ct(tag) ? 20 : 1;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning rate must be positive");
  }
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be positive");
  if (patience < 1) throw InvalidArgument("patience must be positive");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["argmax"] = c.argmax;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.max_epochs = j.value("max_epochs", base.max_epochs);
  base.patience = j.value("patience", base.patience);
  base.seed = j.value("seed", base.seed);
  base.argmax = j.value("argmax", base.argmax);
  return base;
}

int output_count(Task task) { return task == Task::types ? 3 : 1; }

std::vector<float> target_for_task(const DiseaseLabel& label, Task task) {
  switch (task) {
    case Task::identification:
      return {label.tb() ? 1.0f : 0.0f};
    case Task::sequelae:
      if (!label.tb()) {
        throw InvalidArgument("sequelae target is undefined for a healthy record");
      }
      return {label.sequelae() ? 1.0f : 0.0f};
    case Task::types: {
      std::vector<float> t;
      for (bool f : label.types()) t.push_back(f ? 1.0f : 0.0f);
      return t;
    }
  }
  throw InvalidArgument("unknown task");
}

InputPipeline::InputPipeline(const Manifest& manifest, ModalityTag tag,
                             std::optional<preprocessing::SliceMode> slice_mode,
                             const synthesis::CTGenerator* generator)
    : manifest_(manifest), tag_(tag), slice_mode_(slice_mode), generator_(generator) {
  const bool ct = classifiers::uses_ct(tag);
  if (ct != slice_mode.has_value()) {
    throw InvalidArgument(ct ? "CT modality " + std::string(to_string(tag)) +
                                   " needs a slice mode"
                             : "slice mode given for X-ray modality " +
                                   std::string(to_string(tag)));
  }
  if (ct != (generator != nullptr)) {
    throw InvalidArgument(ct ? "CT modality " + std::string(to_string(tag)) +
                                   " needs a generator"
                             : "X-ray modality takes no generator");
  }
  if (ct) {
    const auto want = classifiers::uses_biplanar_ct(tag) ? synthesis::GeneratorMode::B
                                                         : synthesis::GeneratorMode::SV;
    if (generator->mode() != want) {
      throw InvalidArgument("modality " + std::string(to_string(tag)) + " needs a " +
                            std::string(synthesis::to_string(want)) + " generator");
    }
  }
}

classifiers::ArchitectureKind InputPipeline::kind() const {
  return classifiers::architecture_for(tag_);
}

int InputPipeline::input_channels() const {
  if (!classifiers::uses_ct(tag_)) return tag_ == ModalityTag::XRAY_PA_L ? 2 : 1;
  const int depth = generator_->output_dims().depth;
  if (*slice_mode_ == preprocessing::SliceMode::FULL && depth < 1) {
    throw InvalidArgument("generator does not declare its output depth");
  }
  return classifiers::expected_channels(tag_, *slice_mode_, depth);
}

const InputPipeline::Cached& InputPipeline::cached(const PatientRecord& record) {
  if (auto it = cache_.find(record.patient_id); it != cache_.end()) return it->second;
  Cached c;
  c.eval.tag = tag_;
  if (!classifiers::uses_ct(tag_)) {
    // PA mode only falls back to the lateral view when PA is missing, so the
    // selection does not depend on the generator state.
    Rng unused(0);
    const auto modality =
        tag_ == ModalityTag::XRAY_PA_L ? ViewModality::PA_L : ViewModality::PA;
    const ViewSelection sel = select_views(record, modality, unused);
    c.raw_views[0] = io::read_png(manifest_.resolve(sel.first));
    if (sel.second) c.raw_views[1] = io::read_png(manifest_.resolve(*sel.second));
    Rng eval_rng(0);
    for (std::size_t v = 0; v < 2; ++v) {
      if (c.raw_views[v]) {
        c.eval.views[v] = preprocessing::preprocess_xray_2d(*c.raw_views[v], false, eval_rng);
      }
    }
  } else {
    if (!record.pa_image) {
      throw InvalidArgument("record " + record.patient_id + " has no PA view for synthesis");
    }
    const ImagePlane2D pa = io::read_png(manifest_.resolve(*record.pa_image));
    std::optional<ImagePlane2D> lateral;
    if (record.lateral_image) lateral = io::read_png(manifest_.resolve(*record.lateral_image));
    const Volume3D ct = synthesis::synthesize_ct(*generator_, pa, lateral, record.patient_id);
    nn::Tensor stack = preprocessing::normalize_ct(ct, *slice_mode_);
    if (classifiers::uses_fused_xray(tag_)) {
      stack = classifiers::fuse_inputs(stack, preprocessing::preprocess_xray_fusion(pa));
    }
    c.eval.channels = std::move(stack);
  }
  return cache_.emplace(record.patient_id, std::move(c)).first->second;
}

const ModelInput& InputPipeline::eval_input(const PatientRecord& record) {
  return cached(record).eval;
}

ModelInput InputPipeline::train_input(const PatientRecord& record, Rng& rng) {
  const Cached& c = cached(record);
  ModelInput in;
  in.tag = tag_;
  if (!classifiers::uses_ct(tag_)) {
    for (std::size_t v = 0; v < 2; ++v) {
      if (c.raw_views[v]) {
        in.views[v] = preprocessing::preprocess_xray_2d(*c.raw_views[v], true, rng);
      }
    }
  } else {
    // One rotation for the whole stack keeps CT and X-ray channels aligned.
    in.channels = preprocessing::rotate_planes(c.eval.channels,
                                               preprocessing::sample_rotation_deg(rng));
  }
  return in;
}

double EvalResult::headline(Task task) const {
  return task == Task::types ? accuracy_per_label : accuracy_exact;
}

EvalResult evaluate(classifiers::ClassifierModel& model,
                    std::span<const PatientRecord> records, Task task,
                    InputPipeline& pipeline, bool argmax) {
  if (records.empty()) throw InvalidArgument("nothing to evaluate");
  EvalResult r;
  double loss = 0.0;
  for (const auto& rec : records) {
    const std::vector<float> t = target_for_task(rec.label, task);
    const std::vector<float> logits = model.forward(pipeline.eval_input(rec));
    loss += classifiers::bce_with_logits(logits, t);
    r.predictions.push_back(classifiers::predict_from_logits(logits, argmax).labels);
    std::vector<int> ti;
    for (float v : t) ti.push_back(v > 0.5f ? 1 : 0);
    r.targets.push_back(std::move(ti));
  }
  r.loss = loss / static_cast<double>(records.size());
  r.accuracy_exact =
      evaluation::accuracy(r.predictions, r.targets, evaluation::AccuracyMode::exact);
  r.accuracy_per_label =
      evaluation::accuracy(r.predictions, r.targets, evaluation::AccuracyMode::per_label_mean);
  return r;
}

TrainHistory train(classifiers::ClassifierModel& model, const CohortSplit& cohort, Task task,
                   const TrainConfig& config, InputPipeline& pipeline) {
  config.validate();
  if (cohort.train.empty() || cohort.val.empty()) {
    throw InvalidArgument("cohort empty for task " + std::string(to_string(task)));
  }
  if (model.n_outputs() != output_count(task)) {
    throw InvalidArgument("model has " + std::to_string(model.n_outputs()) +
                          " outputs, task " + std::string(to_string(task)) + " needs " +
                          std::to_string(output_count(task)));
  }
  if (model.kind() != pipeline.kind() || model.input_channels() != pipeline.input_channels()) {
    throw InvalidArgument("model shape does not match modality " +
                          std::string(to_string(pipeline.tag())));
  }

  const auto params = model.parameters();
  nn::Adam opt(params, {config.learning_rate});
  Rng shuffle_rng(derive_seed(config.seed, 1));
  Rng augment_rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order(cohort.train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<float> best_values = nn::flatten_values(params);
  int since_best = 0;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double train_loss = 0.0;
    for (std::size_t start = 0, b = 1; start < order.size(); start += batch, ++b) {
      const std::size_t end = std::min(order.size(), start + batch);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const PatientRecord& rec = cohort.train[order[k]];
        const std::vector<float> t = target_for_task(rec.label, task);
        const std::vector<float> logits = model.forward(pipeline.train_input(rec, augment_rng));
        if (!nn::all_finite(logits)) {
          throw TrainingError("non-finite logits at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(b) + " (" + rec.patient_id + ")");
        }
        const double loss = classifiers::bce_with_logits(logits, t);
        if (!std::isfinite(loss)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(b) + " (" + rec.patient_id + ")");
        }
        train_loss += loss;
        std::vector<double> g = classifiers::bce_with_logits_grad(logits, t);
        for (double& v : g) v *= inv_b;
        model.backward(g);
      }
      opt.step();
      for (const auto* p : params) {
        if (!nn::all_finite(p->value)) {
          throw TrainingError("non-finite parameter " + p->name + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(b));
        }
      }
    }
    const EvalResult val = evaluate(model, cohort.val, task, pipeline, config.argmax);
    history.epochs.push_back({epoch, train_loss / static_cast<double>(order.size()), val.loss,
                              val.headline(task)});
    if (val.loss < best_val) {
      best_val = val.loss;
      best_values = nn::flatten_values(params);
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  nn::load_values(params, best_values);
  return history;
}

std::string history_csv(const TrainHistory& history) {
  std::string out = "epoch,train_loss,val_loss,val_acc\n";
  char buf[128];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.6f\n", e.epoch, e.train_loss, e.val_loss,
                  e.val_acc);
    out += buf;
  }
  return out;
}

void write_run_dir(const fs::path& dir, const nlohmann::ordered_json& config,
                   const TrainHistory& history, classifiers::ClassifierModel& model) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  const auto write_text = [](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!(f << text)) throw IoError("cannot write " + p.string());
  };
  write_text(dir / "config.json", config.dump(2) + "\n");
  write_text(dir / "history.csv", history_csv(history));
  classifiers::save_classifier(dir / "best.ckpt", model);
}

}  // namespace tbx::training
