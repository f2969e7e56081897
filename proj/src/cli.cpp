#include "tbx/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tbx/ct_synthesis.hpp"
#include "tbx/data_model.hpp"
#include "tbx/evaluation.hpp"
#include "tbx/image_io.hpp"
#include "tbx/phantom.hpp"
#include "tbx/training.hpp"

namespace tbx::cli {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using classifiers::ModalityTag;
using preprocessing::SliceMode;
using synthesis::GeneratorMode;

// Options bound to variables, so a JSON config can fill whatever the
// command line left unset and the merged values can be written back out.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    CLI::Option* o = app_->add_option("--" + name, var, desc);
    items_.push_back({name, o, [&var] { return ojson(var); },
                      [&var](const json& j) { var = j.get<T>(); }});
    return o;
  }

  CLI::Option* add_flag(const std::string& name, bool& var, const std::string& desc) {
    CLI::Option* o = app_->add_flag("--" + name, var, desc);
    items_.push_back({name, o, [&var] { return ojson(var); },
                      [&var](const json& j) { var = j.get<bool>(); }});
    return o;
  }

  [[nodiscard]] bool given(const std::string& name) const {
    for (const auto& it : items_) {
      if (it.name == name) return it.opt->count() > 0;
    }
    return false;
  }

  void merge(const json& config) {
    for (const auto& [key, value] : config.items()) {
      auto it = std::find_if(items_.begin(), items_.end(),
                             [&](const Item& i) { return i.name == key; });
      if (it == items_.end()) throw UsageError("unknown config key '" + key + "'");
      if (it->opt->count() > 0) continue;
      try {
        it->set(value);
      } catch (const json::exception& e) {
        throw UsageError("config key '" + key + "' has the wrong type: " + e.what());
      }
    }
  }

  [[nodiscard]] ojson resolved() const {
    ojson j = ojson::object();
    for (const auto& it : items_) j[it.name] = it.get();
    return j;
  }

 private:
  struct Item {
    std::string name;
    CLI::Option* opt;
    std::function<ojson()> get;
    std::function<void(const json&)> set;
  };
  CLI::App* app_;
  std::vector<Item> items_;
};

struct Context {
  std::string command;
  std::string run_id;
  std::string started_at;
  std::ostream& out;
  std::ostream& err;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string make_run_id(const std::string& command) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", &tm);
  std::random_device rd;
  char tail[16];
  std::snprintf(tail, sizeof tail, "%08x", rd());
  return command + "-" + stamp + "-" + tail;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  if (!(f << text)) throw IoError("cannot write " + path.string());
}

void write_run_manifest(const fs::path& dir, const Context& ctx, const ojson& config) {
  ojson m;
  m["run_id"] = ctx.run_id;
  m["command"] = ctx.command;
  m["config"] = config;
  m["started_at"] = ctx.started_at;
  m["finished_at"] = utc_now();
  write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

json load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + " must be a JSON object");
  // A run manifest carries its resolved flags under "config".
  if (j.contains("run_id") && j.contains("command") && j.contains("config")) {
    return j.at("config");
  }
  return j;
}

std::uint64_t env_seed() {
  const char* s = std::getenv("TBX_SEED");
  if (s == nullptr || *s == '\0') return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::strlen(s)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("TBX_SEED must be a non-negative integer, got '") + s + "'");
  }
}

template <typename T>
T parse_enum(const std::string& text, T (*parser)(std::string_view), const char* what) {
  try {
    return parser(text);
  } catch (const InvalidArgument&) {
    throw UsageError(std::string("invalid ") + what + " '" + text + "'");
  }
}

std::vector<double> parse_doubles(const std::string& text, const char* what) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string("invalid ") + what + " '" + text + "'");
    }
  }
  return v;
}

Dims3 parse_dims(const std::string& text) {
  const auto v = parse_doubles(text, "dims");
  if (v.size() != 3) throw UsageError("--dims needs D,H,W");
  for (double x : v) {
    if (x < 1 || x != std::floor(x)) throw UsageError("--dims entries must be positive integers");
  }
  return {static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2])};
}

struct Generators {
  std::vector<std::unique_ptr<synthesis::CTGenerator>> owned;
  evaluation::GeneratorSet set;
};

// --gen values: "sv=<path>", "b=<path>", a checkpoint (mode read from its
// header) or a volume directory (serves both modes).
Generators load_generators(const std::vector<std::string>& specs) {
  Generators g;
  const auto bind = [&](GeneratorMode mode, const synthesis::CTGenerator* gen) {
    auto& slot = mode == GeneratorMode::SV ? g.set.sv : g.set.b;
    if (slot != nullptr) {
      throw UsageError("more than one " + std::string(synthesis::to_string(mode)) +
                       " generator given");
    }
    slot = gen;
  };
  for (const auto& spec : specs) {
    std::optional<GeneratorMode> mode;
    std::string path = spec;
    if (const auto eq = spec.find('='); eq != std::string::npos) {
      mode = parse_enum(spec.substr(0, eq), synthesis::parse_generator_mode, "generator mode");
      path = spec.substr(eq + 1);
    }
    if (!mode && fs::is_directory(path)) {
      for (GeneratorMode m : {GeneratorMode::SV, GeneratorMode::B}) {
        g.owned.push_back(std::make_unique<synthesis::DiskGenerator>(path, m));
        bind(m, g.owned.back().get());
      }
      continue;
    }
    g.owned.push_back(synthesis::load_generator(path, mode));
    bind(g.owned.back()->mode(), g.owned.back().get());
  }
  return g;
}

std::optional<SliceMode> slice_option(const std::string& slices, ModalityTag tag) {
  if (slices.empty() || slices == "none") {
    if (classifiers::uses_ct(tag)) {
      throw UsageError("modality " + std::string(to_string(tag)) + " needs --slices full|two");
    }
    return std::nullopt;
  }
  if (!classifiers::uses_ct(tag)) {
    throw UsageError("--slices only applies to CT modalities, not " +
                     std::string(to_string(tag)));
  }
  return parse_enum(slices, preprocessing::parse_slice_mode, "slice mode");
}

void require(bool ok, const std::string& message) {
  if (!ok) throw UsageError(message);
}

// ---- commands ------------------------------------------------------------

struct PhantomOpts {
  long long n = 300;
  std::uint64_t seed = 0;
  std::string out;
  std::string dims = "64,128,128";
  std::string splits = "0.6,0.2,0.2";
  std::string mix;
  double noise = 0.02;
  double baseline = 0.3;
};

void register_phantom(Flags& f, PhantomOpts& o) {
  f.add("n", o.n, "number of phantoms");
  f.add("seed", o.seed, "corpus seed");
  f.add("out", o.out, "output directory");
  f.add("dims", o.dims, "volume dims D,H,W");
  f.add("splits", o.splits, "train,val,test ratios");
  f.add("mix", o.mix, "class mix, e.g. healthy=0.5,tb=0.5 (default: built-in mix)");
  f.add("noise", o.noise, "voxel noise sigma");
  f.add("baseline", o.baseline, "lung baseline intensity");
}

int cmd_phantom(const Context& ctx, const PhantomOpts& o, const ojson& resolved) {
  require(o.n > 0, "--n must be positive");
  require(!o.out.empty(), "--out is required");
  require(o.noise >= 0, "--noise must be non-negative");
  phantom::CorpusOptions c;
  c.n = static_cast<std::size_t>(o.n);
  c.seed = o.seed;
  c.out_dir = o.out;
  c.dims = parse_dims(o.dims);
  const auto r = parse_doubles(o.splits, "splits");
  require(r.size() == 3, "--splits needs three ratios");
  c.split_ratios = {r[0], r[1], r[2]};
  if (!o.mix.empty()) {
    c.class_mix.clear();
    std::stringstream ss(o.mix);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      require(eq != std::string::npos, "--mix entries look like name=proportion");
      const auto p = parse_doubles(item.substr(eq + 1), "mix proportion");
      require(p.size() == 1, "--mix entries look like name=proportion");
      c.class_mix.emplace_back(item.substr(0, eq), p[0]);
    }
  }
  c.noise_sigma = static_cast<float>(o.noise);
  c.lung_baseline = static_cast<float>(o.baseline);
  fs::path manifest;
  try {
    manifest = phantom::build_phantom_corpus(c);
  } catch (const IoError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  write_run_manifest(o.out, ctx, resolved);
  ctx.out << manifest.string() << "\n";
  return kExitOk;
}

struct TrainGenOpts {
  std::string manifest;
  std::string volumes;
  std::string mode = "b";
  int epochs = 30;
  double lr = 1e-3;
  int batch = 4;
  double lambda = 0.1;
  double adversarial = 0.0;
  std::uint64_t seed = 0;
  std::string out;
};

void register_train_gen(Flags& f, TrainGenOpts& o) {
  f.add("manifest", o.manifest, "corpus manifest");
  f.add("volumes", o.volumes, "ground-truth volume dir (default: <manifest dir>/vol)");
  f.add("mode", o.mode, "sv or b");
  f.add("epochs", o.epochs, "training epochs");
  f.add("lr", o.lr, "learning rate");
  f.add("batch", o.batch, "batch size");
  f.add("lambda", o.lambda, "projection-consistency weight");
  f.add("adversarial", o.adversarial, "adversarial loss weight (0 disables)");
  f.add("seed", o.seed, "seed");
  f.add("out", o.out, "output directory (generator.ckpt)");
}

int cmd_train_generator(const Context& ctx, const TrainGenOpts& o, const ojson& resolved) {
  require(!o.manifest.empty() && !o.out.empty(), "--manifest and --out are required");
  synthesis::ToyGeneratorConfig cfg;
  cfg.mode = parse_enum(o.mode, synthesis::parse_generator_mode, "generator mode");
  cfg.epochs = o.epochs;
  cfg.learning_rate = o.lr;
  cfg.batch_size = o.batch;
  cfg.consistency_weight = o.lambda;
  cfg.adversarial_weight = o.adversarial;
  cfg.seed = o.seed;
  require(cfg.epochs > 0 && cfg.batch_size > 0 && cfg.learning_rate > 0 &&
              cfg.consistency_weight >= 0 && cfg.adversarial_weight >= 0,
          "generator hyperparameters must be positive");
  const Manifest m = load_manifest(o.manifest);
  const fs::path vol_dir = o.volumes.empty() ? m.root / "vol" : fs::path(o.volumes);
  std::vector<synthesis::TrainingPair> pairs;
  for (const auto& r : m.records) {
    if (r.split != Split::train || !r.pa_image || !r.lateral_image) continue;
    pairs.push_back({r.patient_id, io::read_png(m.resolve(*r.pa_image)),
                     io::read_png(m.resolve(*r.lateral_image)),
                     io::read_volume(vol_dir / (r.patient_id + ".vol"))});
  }
  if (pairs.size() < synthesis::kMinTrainingPairs) {
    throw UsageError("need at least " + std::to_string(synthesis::kMinTrainingPairs) +
                     " training records with both views, found " +
                     std::to_string(pairs.size()));
  }
  auto fit = synthesis::train_toy_generator(pairs, cfg);
  const fs::path out(o.out);
  fs::create_directories(out);
  fit.generator.save(out / "generator.ckpt");
  std::string log = "epoch,loss\n";
  for (std::size_t e = 0; e < fit.epoch_loss.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e + 1, fit.epoch_loss[e]);
    log += buf;
  }
  write_text(out / "train_log.csv", log);
  write_run_manifest(out, ctx, resolved);
  char msg[160];
  std::snprintf(msg, sizeof msg, "reconstruction MSE %.6f -> %.6f over %zu pairs\n",
                fit.initial_mse, fit.final_mse, pairs.size());
  ctx.out << msg << (out / "generator.ckpt").string() << "\n";
  return kExitOk;
}

struct SynthOpts {
  std::string manifest;
  std::string gen;
  std::string mode;
  std::string out;
};

void register_synth(Flags& f, SynthOpts& o) {
  f.add("manifest", o.manifest, "manifest");
  f.add("gen", o.gen, "generator checkpoint or volume directory");
  f.add("mode", o.mode, "sv or b (default: from the checkpoint)");
  f.add("out", o.out, "output directory for .vol files");
}

int cmd_synthesize(const Context& ctx, const SynthOpts& o, const ojson& resolved) {
  require(!o.manifest.empty() && !o.gen.empty() && !o.out.empty(),
          "--manifest, --gen and --out are required");
  std::optional<GeneratorMode> mode;
  if (!o.mode.empty()) mode = parse_enum(o.mode, synthesis::parse_generator_mode, "mode");
  if (fs::is_directory(o.gen) && !mode) throw UsageError("a volume directory needs --mode");
  const auto gen = synthesis::load_generator(o.gen, mode);
  const Manifest m = load_manifest(o.manifest);
  const fs::path out(o.out);
  fs::create_directories(out);
  std::size_t written = 0, skipped = 0;
  for (const auto& r : m.records) {
    const bool usable = r.pa_image && (gen->mode() == GeneratorMode::SV || r.lateral_image);
    if (!usable) {
      ++skipped;
      ctx.err << "skip " << r.patient_id << ": missing "
              << (r.pa_image ? "lateral" : "PA") << " view\n";
      continue;
    }
    std::optional<ImagePlane2D> lateral;
    if (gen->mode() == GeneratorMode::B) lateral = io::read_png(m.resolve(*r.lateral_image));
    io::write_volume(out / (r.patient_id + ".vol"),
                     synthesis::synthesize_ct(*gen, io::read_png(m.resolve(*r.pa_image)),
                                              lateral, r.patient_id));
    ++written;
  }
  write_run_manifest(out, ctx, resolved);
  ctx.err << "skipped " << skipped << " record(s)\n";
  ctx.out << "wrote " << written << " volume(s) to " << out.string() << "\n";
  return kExitOk;
}

struct CellOpts {
  std::string task = "identification";
  std::string modality = "xray_pa";
  std::string slices;
  std::string manifest;
  std::vector<std::string> gen;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  int batch = 0;
  int max_epochs = 100;
  int patience = 10;
  bool argmax = false;
  std::string out;
};

void register_cell(Flags& f, CellOpts& o) {
  f.add("task", o.task, "identification, sequelae or types");
  f.add("modality", o.modality, "xray_pa, xray_pa+l, ct_sv, ct_b, ct_sv+xray, ct_b+xray");
  f.add("slices", o.slices, "full or two (CT modalities only)");
  f.add("manifest", o.manifest, "manifest");
  f.add("gen", o.gen, "generator: sv=<path>, b=<path>, checkpoint or volume dir")
      ->allow_extra_args(false);
  f.add("seed", o.seed, "seed");
  f.add("lr", o.lr, "learning rate");
  f.add("batch", o.batch, "batch size (0: 1 for X-ray, 20 for CT)");
  f.add("max-epochs", o.max_epochs, "epoch limit");
  f.add("patience", o.patience, "early-stopping patience");
  f.add_flag("argmax", o.argmax, "single-label decoding for the types task");
  f.add("out", o.out, "run directory");
}

struct CellSetup {
  Task task;
  evaluation::ExperimentConfig config;
  Manifest manifest;
  Generators generators;
};

CellSetup prepare_cell(const CellOpts& o) {
  require(!o.manifest.empty(), "--manifest is required");
  CellSetup s;
  s.task = parse_enum(o.task, parse_task, "task");
  s.config.task = s.task;
  s.config.tag = parse_enum(o.modality, classifiers::parse_modality, "modality");
  s.config.slice_mode = slice_option(o.slices, s.config.tag);
  s.config.train = training::TrainConfig::defaults_for(s.config.tag);
  if (o.batch != 0) s.config.train.batch_size = o.batch;
  s.config.train.learning_rate = o.lr;
  s.config.train.max_epochs = o.max_epochs;
  s.config.train.patience = o.patience;
  s.config.train.seed = o.seed;
  s.config.train.argmax = o.argmax;
  try {
    s.config.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  s.generators = load_generators(o.gen);
  if (classifiers::uses_ct(s.config.tag)) {
    try {
      (void)s.generators.set.for_tag(s.config.tag);
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  }
  s.manifest = load_manifest(o.manifest);
  return s;
}

int cmd_train(const Context& ctx, CellOpts& o, Flags& flags) {
  if (o.out.empty()) o.out = (fs::path("runs") / ctx.run_id).string();
  CellSetup s = prepare_cell(o);
  const CohortSplit cohort = filter_cohort(s.manifest.records, s.task);
  training::InputPipeline pipeline(s.manifest, s.config.tag, s.config.slice_mode,
                                   s.generators.set.for_tag(s.config.tag));
  auto model = classifiers::build_classifier(pipeline.kind(), training::output_count(s.task),
                                             pipeline.input_channels(), s.config.train.seed);
  const auto history = training::train(model, cohort, s.task, s.config.train, pipeline);
  const ojson resolved = flags.resolved();
  ojson cfg = resolved;
  cfg["train"] = training::to_json(s.config.train);
  training::write_run_dir(o.out, cfg, history, model);
  write_run_manifest(o.out, ctx, resolved);
  const auto& best = history.epochs[static_cast<std::size_t>(history.best_epoch - 1)];
  char msg[160];
  std::snprintf(msg, sizeof msg, "best epoch %d of %zu: val_loss %.6f val_acc %.4f\n",
                history.best_epoch, history.epochs.size(), best.val_loss, best.val_acc);
  ctx.out << msg << o.out << "\n";
  return kExitOk;
}

struct EvalOpts {
  CellOpts cell;
  std::string ckpt;
  std::string split = "test";
};

int cmd_evaluate(const Context& ctx, EvalOpts& o, const ojson& resolved) {
  require(!o.ckpt.empty(), "--ckpt is required");
  CellSetup s = prepare_cell(o.cell);
  const Split split = parse_enum(o.split, parse_split, "split");
  fs::path ckpt(o.ckpt);
  if (fs::is_directory(ckpt)) ckpt /= "best.ckpt";
  auto model = classifiers::load_classifier(ckpt);
  const CohortSplit cohort = filter_cohort(s.manifest.records, s.task);
  training::InputPipeline pipeline(s.manifest, s.config.tag, s.config.slice_mode,
                                   s.generators.set.for_tag(s.config.tag));
  if (model.kind() != pipeline.kind() || model.input_channels() != pipeline.input_channels() ||
      model.n_outputs() != training::output_count(s.task)) {
    throw UsageError("checkpoint " + ckpt.string() + " does not fit modality " +
                     o.cell.modality + " and task " + o.cell.task);
  }
  const auto r = training::evaluate(model, cohort.part(split), s.task, pipeline, o.cell.argmax);
  ojson j;
  j["split"] = to_string(split);
  j["n"] = cohort.part(split).size();
  j["accuracy"] = r.headline(s.task);
  j["accuracy_exact"] = r.accuracy_exact;
  j["accuracy_per_label"] = r.accuracy_per_label;
  j["loss"] = r.loss;
  if (!o.cell.out.empty()) {
    write_text(fs::path(o.cell.out) / "eval.json", j.dump(2) + "\n");
    write_run_manifest(o.cell.out, ctx, resolved);
  }
  ctx.out << j.dump() << "\n";
  return kExitOk;
}

struct MatrixOpts {
  CellOpts cell;
  int jobs = 1;
};

int cmd_matrix(const Context& ctx, MatrixOpts& o, const ojson& resolved) {
  require(!o.cell.out.empty(), "--out is required");
  require(!o.cell.manifest.empty(), "--manifest is required");
  require(o.jobs >= 1, "--jobs must be positive");
  const Task task = parse_enum(o.cell.task, parse_task, "task");
  auto gens = load_generators(o.cell.gen);
  require(gens.set.b != nullptr, "matrix needs a B generator (--gen)");
  require(task != Task::identification || gens.set.sv != nullptr,
          "identification matrix needs an SV generator (--gen)");
  evaluation::MatrixOptions mo;
  mo.seed = o.cell.seed;
  mo.learning_rate = o.cell.lr;
  mo.max_epochs = o.cell.max_epochs;
  mo.patience = o.cell.patience;
  if (o.cell.batch != 0) mo.batch_size = o.cell.batch;
  mo.argmax = o.cell.argmax;
  mo.jobs = o.jobs;
  mo.run_root = o.cell.out;
  training::TrainConfig probe;
  probe.learning_rate = mo.learning_rate;
  probe.max_epochs = mo.max_epochs;
  probe.patience = mo.patience;
  probe.batch_size = mo.batch_size.value_or(1);
  try {
    probe.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const Manifest m = load_manifest(o.cell.manifest);
  const auto table = evaluation::run_experiment_matrix(task, m, gens.set, mo);
  const fs::path out(o.cell.out);
  const std::string md = evaluation::render_report(table, evaluation::ReportFormat::markdown);
  write_text(out / "report.md", md);
  write_text(out / "report.csv", evaluation::render_report(table, evaluation::ReportFormat::csv));
  write_run_manifest(out, ctx, resolved);
  ctx.out << md;
  return kExitOk;
}

struct ReportOpts {
  std::string in;
  std::string task = "identification";
  std::string out;
};

int cmd_report(const Context& ctx, const ReportOpts& o, const ojson& resolved) {
  require(!o.in.empty(), "--in is required");
  const Task task = parse_enum(o.task, parse_task, "task");
  fs::path in(o.in);
  if (fs::is_directory(in)) in /= "report.csv";
  std::ifstream f(in, std::ios::binary);
  if (!f) throw IoError("cannot read " + in.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const auto table = evaluation::parse_report_csv(ss.str(), task);
  const std::string md = evaluation::render_report(table, evaluation::ReportFormat::markdown);
  if (!o.out.empty()) {
    write_text(fs::path(o.out) / "report.md", md);
    write_text(fs::path(o.out) / "report.csv",
               evaluation::render_report(table, evaluation::ReportFormat::csv));
    write_run_manifest(o.out, ctx, resolved);
  }
  ctx.out << md;
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cmd_replay(const std::string& manifest_path, const std::string& out_override,
               std::ostream& out, std::ostream& err) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError("cannot read " + manifest_path);
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError(manifest_path + " is not valid JSON: " + e.what());
  }
  if (!m.contains("command") || !m.contains("config")) {
    throw UsageError(manifest_path + " is not a run manifest");
  }
  const std::string command = m.at("command").get<std::string>();
  if (command == "replay") throw UsageError("cannot replay a replay");
  std::vector<std::string> args = {"tbx", command, "--config", manifest_path};
  if (!out_override.empty()) {
    args.push_back("--out");
    args.push_back(out_override);
  }
  return dispatch(args, out, err);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic-CT tuberculosis pipeline", "tbx"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  struct Sub {
    CLI::App* app;
    std::unique_ptr<Flags> flags;
    std::string config;
  };
  std::map<std::string, Sub> subs;
  const auto sub = [&](const std::string& name, const std::string& desc) -> Sub& {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, desc);
    s.flags = std::make_unique<Flags>(s.app);
    s.app->add_option("--config", s.config, "JSON config (or run manifest) with defaults");
    return s;
  };

  PhantomOpts phantom_o;
  register_phantom(*sub("phantom", "build a phantom corpus").flags, phantom_o);
  TrainGenOpts gen_o;
  register_train_gen(*sub("train-generator", "train the toy CT generator").flags, gen_o);
  SynthOpts synth_o;
  register_synth(*sub("synthesize", "write generated volumes").flags, synth_o);
  CellOpts train_o;
  register_cell(*sub("train", "train one classifier").flags, train_o);
  EvalOpts eval_o;
  {
    Sub& s = sub("evaluate", "evaluate a trained classifier");
    register_cell(*s.flags, eval_o.cell);
    s.flags->add("ckpt", eval_o.ckpt, "checkpoint or run directory");
    s.flags->add("split", eval_o.split, "train, val or test");
  }
  MatrixOpts matrix_o;
  {
    Sub& s = sub("matrix", "run the modality ablation matrix");
    register_cell(*s.flags, matrix_o.cell);
    s.flags->add("jobs", matrix_o.jobs, "parallel cells");
  }
  ReportOpts report_o;
  {
    Sub& s = sub("report", "re-render a report from report.csv");
    s.flags->add("in", report_o.in, "report.csv or its directory");
    s.flags->add("task", report_o.task, "task of the table");
    s.flags->add("out", report_o.out, "output directory");
  }
  std::string replay_manifest, replay_out;
  CLI::App* replay = app.add_subcommand("replay", "re-run a command from its run manifest");
  replay->add_option("manifest", replay_manifest, "run_manifest.json")->required();
  replay->add_option("--out", replay_out, "override the output directory");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  if (replay->parsed()) return cmd_replay(replay_manifest, replay_out, out, err);

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    if (!s.config.empty()) s.flags->merge(load_config(s.config));
    if (name == "evaluate") {
      // A run directory supplies the cell it was trained for.
      const fs::path run_config = fs::path(eval_o.ckpt) / "config.json";
      if (!eval_o.ckpt.empty() && fs::is_regular_file(run_config)) {
        const json explicit_config = s.config.empty() ? json::object() : load_config(s.config);
        const json trained = load_config(run_config.string());
        json inherited = json::object();
        for (const char* key : {"task", "modality", "slices", "manifest", "gen", "argmax"}) {
          if (trained.contains(key) && !explicit_config.contains(key)) {
            inherited[key] = trained.at(key);
          }
        }
        s.flags->merge(inherited);
      }
    }
    if (!s.flags->given("seed")) {
      bool from_config = false;
      if (!s.config.empty()) from_config = load_config(s.config).contains("seed");
      if (!from_config) {
        const std::uint64_t seed = env_seed();
        if (name == "phantom") phantom_o.seed = seed;
        if (name == "train-generator") gen_o.seed = seed;
        if (name == "train") train_o.seed = seed;
        if (name == "evaluate") eval_o.cell.seed = seed;
        if (name == "matrix") matrix_o.cell.seed = seed;
      }
    }
    const Context ctx{name, make_run_id(name), utc_now(), out, err};
    if (name == "phantom") return cmd_phantom(ctx, phantom_o, s.flags->resolved());
    if (name == "train-generator") return cmd_train_generator(ctx, gen_o, s.flags->resolved());
    if (name == "synthesize") return cmd_synthesize(ctx, synth_o, s.flags->resolved());
    if (name == "train") return cmd_train(ctx, train_o, *s.flags);
    if (name == "evaluate") return cmd_evaluate(ctx, eval_o, s.flags->resolved());
    if (name == "matrix") return cmd_matrix(ctx, matrix_o, s.flags->resolved());
    if (name == "report") return cmd_report(ctx, report_o, s.flags->resolved());
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace tbx::cli
