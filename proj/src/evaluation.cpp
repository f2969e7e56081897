#include "tbx/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

namespace tbx::evaluation {

using classifiers::ModalityTag;
using preprocessing::SliceMode;

double accuracy(const std::vector<std::vector<int>>& predictions,
                const std::vector<std::vector<int>>& labels, AccuracyMode mode) {
  if (predictions.empty()) throw InvalidArgument("accuracy of an empty prediction set");
  if (predictions.size() != labels.size()) {
    throw InvalidArgument("predictions and labels differ in length");
  }
  std::size_t right = 0, cells = 0, exact = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].size() != labels[i].size() || labels[i].empty()) {
      throw InvalidArgument("prediction " + std::to_string(i) + " has the wrong width");
    }
    std::size_t ok = 0;
    for (std::size_t j = 0; j < labels[i].size(); ++j) ok += predictions[i][j] == labels[i][j];
    right += ok;
    cells += labels[i].size();
    exact += ok == labels[i].size();
  }
  return mode == AccuracyMode::exact
             ? static_cast<double>(exact) / static_cast<double>(predictions.size())
             : static_cast<double>(right) / static_cast<double>(cells);
}

double relative_improvement(double candidate, double baseline) {
  if (!(baseline > 0)) throw InvalidArgument("baseline accuracy must be positive");
  return 100.0 * (candidate - baseline) / baseline;
}

std::string format2(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", value);
  std::string s = buf;
  return s == "-0.00" ? "0.00" : s;
}

const synthesis::CTGenerator* GeneratorSet::for_tag(ModalityTag tag) const {
  if (!classifiers::uses_ct(tag)) return nullptr;
  const bool b_mode = classifiers::uses_biplanar_ct(tag);
  const auto* g = b_mode ? b : sv;
  if (g == nullptr) {
    throw InvalidArgument(std::string("modality ") + std::string(to_string(tag)) + " needs a " +
                          (b_mode ? "B" : "SV") + " generator");
  }
  return g;
}

void ExperimentConfig::validate() const {
  if (classifiers::uses_ct(tag) && !slice_mode) {
    throw InvalidArgument("modality " + std::string(to_string(tag)) + " needs --slices");
  }
  if (!classifiers::uses_ct(tag) && slice_mode) {
    throw InvalidArgument("slice mode only applies to CT modalities, not " +
                          std::string(to_string(tag)));
  }
  train.validate();
}

std::string ExperimentConfig::cell_name() const {
  std::string s(to_string(tag));
  if (slice_mode) s += "_" + std::string(preprocessing::to_string(*slice_mode));
  return s;
}

CellResult run_experiment(const ExperimentConfig& config, const Manifest& manifest,
                          const CohortSplit& cohort, const GeneratorSet& generators,
                          const std::optional<fs::path>& run_dir) {
  config.validate();
  if (cohort.test.empty()) {
    throw InvalidArgument("cohort empty for task " + std::string(to_string(config.task)));
  }
  training::InputPipeline pipeline(manifest, config.tag, config.slice_mode,
                                   generators.for_tag(config.tag));
  auto model = classifiers::build_classifier(pipeline.kind(),
                                             training::output_count(config.task),
                                             pipeline.input_channels(), config.train.seed);
  CellResult r;
  r.config = config;
  r.history = training::train(model, cohort, config.task, config.train, pipeline);
  const auto test = training::evaluate(model, cohort.test, config.task, pipeline,
                                       config.train.argmax);
  r.accuracy = test.headline(config.task);
  r.accuracy_exact = test.accuracy_exact;
  r.accuracy_per_label = test.accuracy_per_label;
  r.parameter_checksum = model.checksum();
  if (run_dir) {
    nlohmann::ordered_json j;
    j["task"] = to_string(config.task);
    j["modality"] = to_string(config.tag);
    j["slice_mode"] = config.slice_mode
                          ? nlohmann::ordered_json(preprocessing::to_string(*config.slice_mode))
                          : nlohmann::ordered_json(nullptr);
    j["train"] = training::to_json(config.train);
    j["test_accuracy"] = r.accuracy;
    j["test_accuracy_exact"] = r.accuracy_exact;
    j["test_accuracy_per_label"] = r.accuracy_per_label;
    training::write_run_dir(*run_dir, j, r.history, model);
  }
  return r;
}

std::string matrix_row_label(Task task, ModalityTag tag) {
  if (task == Task::identification) return std::string(classifiers::row_label(tag));
  switch (tag) {
    case ModalityTag::XRAY_PA: return "X-ray";
    case ModalityTag::CT_B: return "CT";
    case ModalityTag::CT_B_XRAY: return "CT + X-ray";
    default: break;
  }
  throw InvalidArgument("modality " + std::string(to_string(tag)) + " is not part of the " +
                        std::string(to_string(task)) + " table");
}

std::vector<ExperimentConfig> matrix_cells(Task task, const training::TrainConfig& base,
                                           std::optional<int> batch_size) {
  std::vector<std::pair<ModalityTag, std::optional<SliceMode>>> layout;
  if (task == Task::identification) {
    layout = {{ModalityTag::XRAY_PA, std::nullopt}, {ModalityTag::XRAY_PA_L, std::nullopt}};
    for (ModalityTag t : {ModalityTag::CT_SV, ModalityTag::CT_B, ModalityTag::CT_SV_XRAY,
                          ModalityTag::CT_B_XRAY}) {
      layout.emplace_back(t, SliceMode::FULL);
      layout.emplace_back(t, SliceMode::TWO_SLICE);
    }
  } else {
    layout = {{ModalityTag::XRAY_PA, std::nullopt},
              {ModalityTag::CT_B, SliceMode::TWO_SLICE},
              {ModalityTag::CT_B_XRAY, SliceMode::TWO_SLICE}};
  }
  std::vector<ExperimentConfig> cells;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    ExperimentConfig c;
    c.task = task;
    c.tag = layout[i].first;
    c.slice_mode = layout[i].second;
    c.train = base;
    c.train.batch_size =
        batch_size.value_or(training::TrainConfig::defaults_for(c.tag).batch_size);
    c.train.seed = derive_seed(base.seed, 1000 + i);
    cells.push_back(c);
  }
  return cells;
}

ResultTable run_experiment_matrix(Task task, const Manifest& manifest,
                                  const GeneratorSet& generators,
                                  const MatrixOptions& options) {
  training::TrainConfig base;
  base.learning_rate = options.learning_rate;
  base.max_epochs = options.max_epochs;
  base.patience = options.patience;
  base.seed = options.seed;
  base.argmax = options.argmax;
  const auto cells = matrix_cells(task, base, options.batch_size);
  for (const auto& c : cells) {
    c.validate();
    (void)generators.for_tag(c.tag);
  }
  const CohortSplit cohort = filter_cohort(manifest.records, task);

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        std::optional<fs::path> dir;
        if (options.run_root) dir = *options.run_root / "cells" / cells[i].cell_name();
        results[i] = run_experiment(cells[i], manifest, cohort, generators, dir);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    }
  };
  const int jobs = std::clamp(options.jobs, 1, static_cast<int>(cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return assemble_table(task, results);
}

ResultTable assemble_table(Task task, const std::vector<CellResult>& cells) {
  ResultTable table;
  table.task = task;
  std::optional<double> baseline;
  for (const auto& c : cells) {
    if (c.config.tag == ModalityTag::XRAY_PA) baseline = c.accuracy;
  }
  for (const auto& c : cells) {
    TableRow row;
    row.label = matrix_row_label(task, c.config.tag);
    row.tag = c.config.tag;
    row.slice_mode = c.config.slice_mode;
    row.accuracy = c.accuracy;
    row.accuracy_exact = c.accuracy_exact;
    row.baseline = c.config.tag == ModalityTag::XRAY_PA;
    if (!row.baseline && baseline && *baseline > 0) {
      row.improvement = relative_improvement(c.accuracy, *baseline);
    }
    table.rows.push_back(row);
  }
  return table;
}

namespace {

std::string task_title(Task task) {
  switch (task) {
    case Task::identification: return "Disease identification (healthy vs TB)";
    case Task::types: return "TB type classification (granuloma, cavitation, calcification)";
    case Task::sequelae: return "TB vs TB sequelae";
  }
  return "";
}

std::string slice_text(const std::optional<SliceMode>& mode) {
  return mode ? std::string(preprocessing::to_string(*mode)) : "none";
}

std::string improvement_text(const TableRow& row) {
  if (!row.improvement) return "";
  const std::string v = format2(*row.improvement);
  return v[0] == '-' ? v : "+" + v;
}

// Emphasis by two-decimal value: bold for the best, underline for the
// runner-up value.
struct Ranking {
  double best = -1.0, second = -1.0;
  std::size_t best_count = 0;
};

double round2(double v) { return std::round(v * 100.0) / 100.0; }

Ranking rank(const ResultTable& table) {
  std::set<double, std::greater<>> values;
  for (const auto& r : table.rows) values.insert(round2(r.accuracy));
  Ranking k;
  auto it = values.begin();
  k.best = *it;
  if (++it != values.end()) k.second = *it;
  for (const auto& r : table.rows) k.best_count += round2(r.accuracy) == k.best;
  return k;
}

std::string emphasize(double value, const Ranking& k) {
  const std::string s = format2(value);
  if (round2(value) == k.best) return "**" + s + "**";
  if (round2(value) == k.second) return "<u>" + s + "</u>";
  return s;
}

std::string cell_text(const TableRow& row, const Ranking& k) {
  std::string s = emphasize(row.accuracy, k);
  if (row.improvement) s += " (" + improvement_text(row) + "%)";
  return s;
}

}  // namespace

std::string render_report(const ResultTable& table, ReportFormat format) {
  if (table.rows.empty()) throw InvalidArgument("cannot render an empty table");
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    out << kReportCsvHeader << "\n";
    char acc[32];
    for (const auto& r : table.rows) {
      std::snprintf(acc, sizeof acc, "%.4f", r.accuracy);
      out << r.label << "," << slice_text(r.slice_mode) << "," << acc << ","
          << (r.improvement ? format2(*r.improvement) : "") << "\n";
    }
    return out.str();
  }

  const Ranking k = rank(table);
  out << "## " << task_title(table.task) << "\n\n";
  if (table.task == Task::identification) {
    out << "| Input | Accuracy | |\n|---|---|---|\n";
    for (const auto& r : table.rows) {
      if (!r.slice_mode) out << "| " << r.label << " | " << cell_text(r, k) << " | |\n";
    }
    out << "| | **Full CT** | **2-Slice CT** |\n";
    std::vector<std::string> order;
    for (const auto& r : table.rows) {
      if (r.slice_mode && std::find(order.begin(), order.end(), r.label) == order.end()) {
        order.push_back(r.label);
      }
    }
    for (const auto& label : order) {
      std::string full = "-", two = "-";
      for (const auto& r : table.rows) {
        if (r.label != label) continue;
        (*r.slice_mode == SliceMode::FULL ? full : two) = cell_text(r, k);
      }
      out << "| " << label << " | " << full << " | " << two << " |\n";
    }
  } else {
    const bool types = table.task == Task::types;
    out << "| Input | Accuracy |" << (types ? " Exact match |" : "") << "\n|---|---|"
        << (types ? "---|" : "") << "\n";
    for (const auto& r : table.rows) {
      out << "| " << r.label << " | " << cell_text(r, k) << " |";
      if (types) out << " " << format2(r.accuracy_exact) << " |";
      out << "\n";
    }
  }
  out << "\nTest accuracy";
  if (table.task == Task::types) out << " (per-label mean; exact match alongside)";
  out << ". Improvements in parentheses are relative to the X-ray"
      << (table.task == Task::identification ? " (PA)" : "")
      << " row. Best result in bold, second best underlined.\n";
  if (k.best_count > 1) {
    out << "\nTie for best (" << format2(k.best) << "):";
    bool first = true;
    for (const auto& r : table.rows) {
      if (round2(r.accuracy) != k.best) continue;
      out << (first ? " " : ", ") << r.label;
      if (r.slice_mode) out << " [" << slice_text(r.slice_mode) << "]";
      first = false;
    }
    out << ".\n";
  }
  return out.str();
}

ResultTable parse_report_csv(std::string_view text, Task task) {
  ResultTable table;
  table.task = task;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) {
    throw InvalidArgument("report CSV header mismatch");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const std::size_t c = line.find(',', pos);
      f.push_back(line.substr(pos, c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 4) throw InvalidArgument("report CSV row needs 4 fields: " + line);
    TableRow r;
    r.label = f[0];
    if (f[1] != "none") r.slice_mode = preprocessing::parse_slice_mode(f[1]);
    r.accuracy = std::stod(f[2]);
    if (!f[3].empty()) r.improvement = std::stod(f[3]);
    r.baseline = !r.improvement;
    table.rows.push_back(r);
  }
  return table;
}

std::vector<MarkdownCell> parse_report_markdown(std::string_view text) {
  std::vector<MarkdownCell> cells;
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::string> columns = {"Accuracy"};
  const std::regex number(R"((\*\*|<u>)?(-?[0-9]+\.[0-9]+))");
  while (std::getline(in, line)) {
    if (line.rfind("| ", 0) != 0) continue;
    std::vector<std::string> parts;
    std::size_t pos = 1;
    while (pos < line.size()) {
      const std::size_t bar = line.find('|', pos);
      if (bar == std::string::npos) break;
      std::string p = line.substr(pos, bar - pos);
      const auto b = p.find_first_not_of(' '), e = p.find_last_not_of(' ');
      parts.push_back(b == std::string::npos ? "" : p.substr(b, e - b + 1));
      pos = bar + 1;
    }
    if (parts.empty() || parts[0] == "Input") continue;
    if (parts[0].empty()) {  // sub-header row naming the CT columns
      columns.clear();
      for (std::size_t i = 1; i < parts.size(); ++i) {
        std::string c = parts[i];
        if (c.size() > 4 && c.rfind("**", 0) == 0) c = c.substr(2, c.size() - 4);
        columns.push_back(c);
      }
      continue;
    }
    for (std::size_t i = 1; i < parts.size() && i - 1 < columns.size(); ++i) {
      std::smatch m;
      if (!std::regex_search(parts[i], m, number) || m.position(0) != 0) continue;
      MarkdownCell c;
      c.row_label = parts[0];
      c.column = columns[i - 1];
      c.value = std::stod(m[2].str());
      c.bold = m[1].str() == "**";
      c.underlined = m[1].str() == "<u>";
      cells.push_back(c);
    }
  }
  return cells;
}

}  // namespace tbx::evaluation
