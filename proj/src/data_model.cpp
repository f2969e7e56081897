#include "tbx/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tbx {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view to_string(Task task) {
  switch (task) {
    case Task::identification: return "identification";
    case Task::sequelae: return "sequelae";
    case Task::types: return "types";
  }
  return "?";
}

std::string_view to_string(Provenance provenance) {
  switch (provenance) {
    case Provenance::phantom: return "phantom";
    case Provenance::generated_sv: return "generated_sv";
    case Provenance::generated_b: return "generated_b";
    case Provenance::external: return "external";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw InvalidArgument("unknown split '" + std::string(text) + "'");
}

Task parse_task(std::string_view text) {
  if (text == "identification") return Task::identification;
  if (text == "sequelae") return Task::sequelae;
  if (text == "types") return Task::types;
  throw InvalidArgument("unknown task '" + std::string(text) + "'");
}

Provenance parse_provenance(std::string_view text) {
  if (text == "phantom") return Provenance::phantom;
  if (text == "generated_sv") return Provenance::generated_sv;
  if (text == "generated_b") return Provenance::generated_b;
  if (text == "external") return Provenance::external;
  throw InvalidArgument("unknown provenance '" + std::string(text) + "'");
}

DiseaseLabel::DiseaseLabel(bool tb, bool sequelae,
                           std::array<bool, kFindingCount> types)
    : tb_(tb), sequelae_(sequelae), types_(types) {
  if (!tb_ && (sequelae_ || any_finding())) {
    throw InvalidArgument(
        "label inconsistency: tb=0 but sequelae or finding flags are set");
  }
}

bool DiseaseLabel::any_finding() const {
  return std::any_of(types_.begin(), types_.end(), [](bool b) { return b; });
}

ImagePlane2D::ImagePlane2D(int width, int height, std::vector<float> pixels,
                           int bit_depth)
    : width_(width), height_(height), bit_depth_(bit_depth),
      pixels_(std::move(pixels)) {
  if (width_ <= 0 || height_ <= 0) {
    throw InvalidArgument("image dimensions must be positive");
  }
  if (pixels_.size() != static_cast<std::size_t>(width_) * height_) {
    throw InvalidArgument("image pixel count does not match width x height");
  }
  if (!std::all_of(pixels_.begin(), pixels_.end(),
                   [](float v) { return std::isfinite(v); })) {
    throw InvalidArgument("image contains non-finite pixels");
  }
}

std::string to_string(const Dims3& dims) {
  return std::to_string(dims.depth) + "x" + std::to_string(dims.height) + "x" +
         std::to_string(dims.width);
}

Volume3D::Volume3D(Dims3 dims, std::vector<float> voxels, Provenance provenance)
    : dims_(dims), voxels_(std::move(voxels)), provenance_(provenance) {
  if (dims_.depth <= 0 || dims_.height <= 0 || dims_.width <= 0) {
    throw InvalidArgument("volume dimensions must be positive");
  }
  if (voxels_.size() != dims_.count()) {
    throw InvalidArgument("voxel count does not match D*H*W (" +
                          to_string(dims_) + ")");
  }
  if (!std::all_of(voxels_.begin(), voxels_.end(),
                   [](float v) { return std::isfinite(v); })) {
    throw InvalidArgument("volume contains non-finite voxels");
  }
}

ManifestError::ManifestError(std::size_t line, std::string_view field,
                             std::string_view problem)
    : Error("manifest row " + std::to_string(line) + ", field '" +
            std::string(field) + "': " + std::string(problem)),
      line_(line),
      field_(field) {}

namespace {

constexpr std::array<std::string_view, 9> kColumns = {
    "patient_id", "pa_path",    "l_path",        "tb",   "sequelae",
    "granuloma",  "cavitation", "calcification", "split"};

std::string_view rtrim(std::string_view s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r' || s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

bool parse_flag(std::string_view text, std::size_t line, std::size_t column) {
  if (text == "0") return false;
  if (text == "1") return true;
  throw ManifestError(line, kColumns[column],
                      "expected 0 or 1, got '" + std::string(text) + "'");
}

}  // namespace

Manifest parse_manifest(std::string_view csv_text, fs::path root) {
  Manifest manifest;
  manifest.root = std::move(root);

  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= csv_text.size()) {
    const auto nl = csv_text.find('\n', pos);
    if (nl == std::string_view::npos) {
      lines.push_back(csv_text.substr(pos));
      break;
    }
    lines.push_back(csv_text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  while (!lines.empty() && rtrim(lines.back()).empty()) lines.pop_back();

  if (lines.empty() || rtrim(lines.front()) != kManifestHeader) {
    throw ManifestError(1, "header",
                        "expected header '" + std::string(kManifestHeader) + "'");
  }

  std::unordered_set<std::string> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const auto fields = split_fields(rtrim(lines[i]));
    if (fields.size() != kColumns.size()) {
      throw ManifestError(line_no, "row",
                          "expected 9 fields, got " +
                              std::to_string(fields.size()));
    }
    PatientRecord rec;
    rec.patient_id = std::string(fields[0]);
    if (rec.patient_id.empty()) {
      throw ManifestError(line_no, kColumns[0], "empty patient_id");
    }
    if (!fields[1].empty()) rec.pa_image = fs::path(std::string(fields[1]));
    if (!fields[2].empty()) rec.lateral_image = fs::path(std::string(fields[2]));
    if (!rec.pa_image && !rec.lateral_image) {
      throw ManifestError(line_no, kColumns[1],
                          "record has neither a PA nor a lateral image");
    }
    const bool tb = parse_flag(fields[3], line_no, 3);
    const bool seq = parse_flag(fields[4], line_no, 4);
    const std::array<bool, kFindingCount> types = {
        parse_flag(fields[5], line_no, 5), parse_flag(fields[6], line_no, 6),
        parse_flag(fields[7], line_no, 7)};
    try {
      rec.label = DiseaseLabel(tb, seq, types);
    } catch (const InvalidArgument& e) {
      throw ManifestError(line_no, "tb", e.what());
    }
    try {
      rec.split = parse_split(fields[8]);
    } catch (const InvalidArgument& e) {
      throw ManifestError(line_no, kColumns[8], e.what());
    }
    if (!seen.insert(rec.patient_id).second) {
      throw ManifestError(line_no, kColumns[0],
                          "duplicate patient_id '" + rec.patient_id + "'");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.parent_path());
}

std::string manifest_to_csv(std::span<const PatientRecord> records) {
  std::string out(kManifestHeader);
  out += '\n';
  auto flag = [](bool b) { return b ? '1' : '0'; };
  for (const auto& r : records) {
    out += r.patient_id;
    out += ',';
    if (r.pa_image) out += r.pa_image->generic_string();
    out += ',';
    if (r.lateral_image) out += r.lateral_image->generic_string();
    out += ',';
    out += flag(r.label.tb());
    out += ',';
    out += flag(r.label.sequelae());
    for (bool t : r.label.types()) {
      out += ',';
      out += flag(t);
    }
    out += ',';
    out += to_string(r.split);
    out += '\n';
  }
  return out;
}

void write_manifest(const fs::path& path, std::span<const PatientRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_csv(records);
  if (!out) throw IoError("failed writing manifest " + path.string());
}

const std::vector<PatientRecord>& CohortSplit::part(Split split) const {
  switch (split) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return train;
}

bool eligible_for_task(const PatientRecord& record, Task task) {
  switch (task) {
    case Task::identification: return true;  // healthy or tb, both valid
    case Task::sequelae: return record.label.tb();
    case Task::types: return record.label.any_finding();
  }
  return false;
}

CohortSplit filter_cohort(std::span<const PatientRecord> records, Task task) {
  CohortSplit cohort;
  cohort.task = task;
  for (const auto& r : records) {
    if (!eligible_for_task(r, task)) continue;
    switch (r.split) {
      case Split::train: cohort.train.push_back(r); break;
      case Split::val: cohort.val.push_back(r); break;
      case Split::test: cohort.test.push_back(r); break;
    }
  }
  for (Split s : {Split::train, Split::val, Split::test}) {
    if (cohort.part(s).empty()) {
      throw InvalidArgument("cohort empty for task " +
                            std::string(to_string(task)) + " (" +
                            std::string(to_string(s)) + " split)");
    }
  }
  return cohort;
}

ViewSelection select_views(const PatientRecord& record, ViewModality modality,
                           Rng& rng) {
  if (modality == ViewModality::PA_L) {
    if (!record.pa_image || !record.lateral_image) {
      throw InvalidArgument("view unavailable: PA_L needs both views for " +
                            record.patient_id);
    }
    return {*record.pa_image, *record.lateral_image};
  }
  if (record.pa_image) return {*record.pa_image, std::nullopt};
  std::vector<fs::path> available;
  if (record.lateral_image) available.push_back(*record.lateral_image);
  if (available.empty()) {
    throw InvalidArgument("view unavailable: no image for " + record.patient_id);
  }
  std::uniform_int_distribution<std::size_t> pick(0, available.size() - 1);
  return {available[pick(rng)], std::nullopt};
}

std::vector<std::size_t> largest_remainder(std::size_t total,
                                           std::span<const double> proportions) {
  if (proportions.empty()) throw InvalidArgument("no proportions given");
  const double sum = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-9) {
    throw InvalidArgument("proportions must sum to 1");
  }
  std::vector<std::size_t> counts(proportions.size());
  std::vector<double> remainders(proportions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    if (proportions[i] < 0) throw InvalidArgument("negative proportion");
    const double exact = proportions[i] * static_cast<double>(total);
    // Guard against 0.6*100 = 59.999...
    const double floored = std::floor(exact + 1e-9);
    counts[i] = static_cast<std::size_t>(floored);
    remainders[i] = exact - floored;
    assigned += counts[i];
  }
  std::vector<std::size_t> order(proportions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainders[a] > remainders[b];
  });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
    ++counts[order[k % order.size()]];
  }
  return counts;
}

std::vector<PatientRecord> assign_splits(std::vector<PatientRecord> records,
                                         std::array<double, 3> ratios,
                                         std::uint64_t seed) {
  std::map<unsigned, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& l = records[i].label;
    const unsigned key = (l.tb() ? 1u : 0u) | (l.sequelae() ? 2u : 0u) |
                         (l.types()[0] ? 4u : 0u) | (l.types()[1] ? 8u : 0u) |
                         (l.types()[2] ? 16u : 0u);
    strata[key].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> order;
  order.reserve(records.size());
  for (auto& [key, members] : strata) {
    std::shuffle(members.begin(), members.end(), rng);
    order.insert(order.end(), members.begin(), members.end());
  }

  // Sequential quota apportionment over the stratum-ordered list: totals
  // match largest_remainder exactly and each stratum is split near-evenly.
  const std::size_t n = records.size();
  const auto targets = largest_remainder(n, ratios);
  std::array<std::size_t, 3> assigned{};
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < 3; ++j) {
      if (assigned[j] >= targets[j]) continue;
      const double deficit = static_cast<double>(targets[j]) *
                                 static_cast<double>(k + 1) /
                                 static_cast<double>(n) -
                             static_cast<double>(assigned[j]);
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = j;
      }
    }
    records[order[k]].split = static_cast<Split>(best);
    ++assigned[best];
  }
  return records;
}

}  // namespace tbx
