#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "tbx/data_model.hpp"

using namespace tbx;

namespace {

std::string header() { return std::string(kManifestHeader) + "\n"; }

PatientRecord make_record(const std::string& id, bool tb, bool sequelae,
                          std::array<bool, 3> types, Split split) {
  PatientRecord r;
  r.patient_id = id;
  r.pa_image = "img/" + id + "_pa.png";
  r.lateral_image = "img/" + id + "_l.png";
  r.label = DiseaseLabel(tb, sequelae, types);
  r.split = split;
  return r;
}

// Independent row scan of the task predicate over raw CSV text.
std::array<std::size_t, 3> scan_counts(const std::string& csv, Task task) {
  std::array<std::size_t, 3> counts{};
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 8) f.emplace_back();
    const bool tb = f[3] == "1";
    const bool any = f[5] == "1" || f[6] == "1" || f[7] == "1";
    bool keep = false;
    switch (task) {
      case Task::identification: keep = true; break;
      case Task::sequelae: keep = tb; break;
      case Task::types: keep = any; break;
    }
    if (!keep) continue;
    const std::string& s = f[8];
    ++counts[s == "train" ? 0 : s == "val" ? 1 : 2];
  }
  return counts;
}

}  // namespace

TEST_CASE("manifest rows map to records") {
  const Manifest m = parse_manifest(header() +
                                    "p001,img/p001_pa.png,img/p001_l.png,1,0,1,0,0,train\n"
                                    "p002,img/p002_pa.png,,0,0,0,0,0,test\n",
                                    "/data");
  REQUIRE(m.records.size() == 2);
  const auto& a = m.records[0];
  CHECK(a.patient_id == "p001");
  CHECK(a.pa_image == fs::path("img/p001_pa.png"));
  CHECK(a.lateral_image == fs::path("img/p001_l.png"));
  CHECK(a.label.tb());
  CHECK_FALSE(a.label.sequelae());
  CHECK(a.label.has(Finding::granuloma));
  CHECK_FALSE(a.label.has(Finding::cavitation));
  CHECK(a.split == Split::train);
  const auto& b = m.records[1];
  CHECK(b.pa_image.has_value());
  CHECK_FALSE(b.lateral_image.has_value());
  CHECK(b.label.is_healthy());
  CHECK(b.split == Split::test);
  CHECK(m.resolve("img/x.png") == fs::path("/data/img/x.png"));
}

TEST_CASE("manifest errors") {
  SUBCASE("label inconsistency") {
    CHECK_THROWS_WITH_AS(
        parse_manifest(header() + "p1,a.png,,0,0,1,0,0,train\n"),
        doctest::Contains("label inconsistency"), ManifestError);
  }
  SUBCASE("error names line and field") {
    try {
      parse_manifest(header() + "p1,a.png,,1,0,0,0,0,train\np2,b.png,,1,0,7,0,0,val\n");
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(e.line() == 3);
      CHECK(e.field() == "granuloma");
    }
  }
  SUBCASE("duplicate patient id") {
    CHECK_THROWS_AS(parse_manifest(header() + "p1,a.png,,0,0,0,0,0,train\n"
                                              "p1,b.png,,0,0,0,0,0,val\n"),
                    ManifestError);
  }
  SUBCASE("bad split and wrong header") {
    CHECK_THROWS_AS(parse_manifest(header() + "p1,a.png,,0,0,0,0,0,holdout\n"),
                    ManifestError);
    CHECK_THROWS_AS(parse_manifest("id,pa\np1,a.png\n"), ManifestError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.csv"), IoError);
  }
}

TEST_CASE("manifest round trip is byte identical") {
  const std::string csv = header() +
                          "p001,img/p001_pa.png,img/p001_l.png,1,0,1,0,0,train\n"
                          "p002,img/p002_pa.png,,0,0,0,0,0,test\n"
                          "p003,,img/p003_l.png,1,1,0,1,1,val\n";
  const Manifest m = parse_manifest(csv);
  CHECK(manifest_to_csv(m.records) == csv);

  test::TempDir dir("manifest");
  write_manifest(dir / "m.csv", m.records);
  const Manifest back = load_manifest(dir / "m.csv");
  CHECK(back.records == m.records);
  CHECK(back.root == dir.path());
}

TEST_CASE("label invariants") {
  CHECK_THROWS_AS(DiseaseLabel(false, true, {false, false, false}), InvalidArgument);
  CHECK_THROWS_AS(DiseaseLabel(false, false, {false, false, true}), InvalidArgument);
  const DiseaseLabel l(true, false, {true, false, true});
  CHECK(l.any_finding());
  CHECK(DiseaseLabel::healthy().is_healthy());
  CHECK_FALSE(DiseaseLabel(true, false, {}).any_finding());
}

TEST_CASE("volume and image invariants") {
  CHECK_THROWS_AS(Volume3D(Dims3{2, 2, 2}, std::vector<float>(7), Provenance::phantom),
                  InvalidArgument);
  std::vector<float> bad(8, 0.0f);
  bad[3] = std::nanf("");
  CHECK_THROWS_AS(Volume3D(Dims3{2, 2, 2}, bad, Provenance::phantom), InvalidArgument);
  CHECK_THROWS_AS(ImagePlane2D(3, 2, std::vector<float>(5)), InvalidArgument);
  const Volume3D v(Dims3{1, 2, 3}, {0, 1, 2, 3, 4, 5}, Provenance::phantom);
  CHECK(v.at(0, 1, 2) == 5.0f);
  const Volume3D r = v.restamped(Provenance::generated_b);
  CHECK(r.provenance() == Provenance::generated_b);
  CHECK(v.provenance() == Provenance::phantom);
}

TEST_CASE("filter_cohort sizes match an independent row scan") {
  // Cohort sizes of the clinical study, reproduced with synthetic rows:
  // identification 274/91/91 and types 453/123/181 (plus healthy rows the
  // types filter must drop).
  std::vector<PatientRecord> ident;
  const std::array<std::size_t, 3> ident_sizes{274, 91, 91};
  int id = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < ident_sizes[s]; ++k, ++id) {
      const bool tb = k % 2 == 0;
      ident.push_back(make_record("i" + std::to_string(id), tb, tb && k % 6 == 0,
                                  {tb && k % 4 == 0, false, false}, static_cast<Split>(s)));
    }
  }
  const auto ic = filter_cohort(ident, Task::identification);
  CHECK(ic.train.size() == 274);
  CHECK(ic.val.size() == 91);
  CHECK(ic.test.size() == 91);
  CHECK(scan_counts(manifest_to_csv(ident), Task::identification) ==
        std::array<std::size_t, 3>{274, 91, 91});

  std::vector<PatientRecord> types;
  const std::array<std::size_t, 3> type_sizes{453, 123, 181};
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < type_sizes[s]; ++k, ++id) {
      const std::array<bool, 3> t{k % 3 == 0, k % 3 == 1, k % 3 == 2 || k % 5 == 0};
      types.push_back(make_record("t" + std::to_string(id), true, false, t,
                                  static_cast<Split>(s)));
    }
    for (int k = 0; k < 17; ++k, ++id) {
      types.push_back(make_record("h" + std::to_string(id), false, false, {},
                                  static_cast<Split>(s)));
    }
  }
  const auto tc = filter_cohort(types, Task::types);
  CHECK(tc.train.size() == 453);
  CHECK(tc.val.size() == 123);
  CHECK(tc.test.size() == 181);
  CHECK(scan_counts(manifest_to_csv(types), Task::types) ==
        std::array<std::size_t, 3>{453, 123, 181});
  for (const auto& r : tc.train) CHECK(r.label.any_finding());

  const auto sc = filter_cohort(types, Task::sequelae);
  CHECK(scan_counts(manifest_to_csv(types), Task::sequelae) ==
        std::array<std::size_t, 3>{sc.train.size(), sc.val.size(), sc.test.size()});
}

TEST_CASE("filter_cohort keeps splits disjoint and rejects empty splits") {
  std::vector<PatientRecord> rs;
  for (int k = 0; k < 30; ++k) {
    rs.push_back(make_record("p" + std::to_string(k), k % 2 == 1, false,
                             {k % 2 == 1, false, false}, static_cast<Split>(k % 3)));
  }
  const auto c = filter_cohort(rs, Task::identification);
  std::set<std::string> ids;
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (const auto& r : c.part(s)) CHECK(ids.insert(r.patient_id).second);
  }
  CHECK(ids.size() == 30);

  std::vector<PatientRecord> healthy_only;
  for (int k = 0; k < 6; ++k) {
    healthy_only.push_back(
        make_record("h" + std::to_string(k), false, false, {}, static_cast<Split>(k % 3)));
  }
  CHECK_THROWS_WITH_AS(filter_cohort(healthy_only, Task::types),
                       doctest::Contains("cohort empty for task"), InvalidArgument);
}

TEST_CASE("select_views") {
  Rng rng(7);
  const auto both = make_record("a", true, false, {true, false, false}, Split::train);
  const auto pair = select_views(both, ViewModality::PA_L, rng);
  CHECK(pair.first == *both.pa_image);
  CHECK(pair.second == both.lateral_image);

  PatientRecord pa_only = both;
  pa_only.lateral_image.reset();
  Rng untouched(7), reference(7);
  CHECK(select_views(pa_only, ViewModality::PA, untouched).first == *pa_only.pa_image);
  CHECK(untouched() == reference());
  CHECK_THROWS_WITH_AS(select_views(pa_only, ViewModality::PA_L, rng),
                       doctest::Contains("view unavailable"), InvalidArgument);

  PatientRecord lat_only = both;
  lat_only.pa_image.reset();
  Rng r1(7), r2(7);
  CHECK(select_views(lat_only, ViewModality::PA, r1).first ==
        select_views(lat_only, ViewModality::PA, r2).first);
  Rng r3(7), r4(7);
  CHECK(select_views(both, ViewModality::PA, r3).first ==
        select_views(both, ViewModality::PA, r4).first);
}

TEST_CASE("largest_remainder") {
  const std::vector<double> p{0.6, 0.2, 0.2};
  CHECK(largest_remainder(300, p) == std::vector<std::size_t>{180, 60, 60});
  CHECK(largest_remainder(7, std::vector<double>{0.5, 0.5}) ==
        std::vector<std::size_t>{4, 3});
  for (std::size_t n = 0; n < 60; ++n) {
    const auto c = largest_remainder(n, p);
    CHECK(std::accumulate(c.begin(), c.end(), std::size_t{0}) == n);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::abs(static_cast<double>(c[j]) - p[j] * n) < 1.0);
    }
  }
  CHECK_THROWS_AS(largest_remainder(10, std::vector<double>{0.5, 0.4}), InvalidArgument);
}

TEST_CASE("assign_splits is seeded and stratified") {
  std::vector<PatientRecord> rs;
  for (int k = 0; k < 100; ++k) {
    const bool tb = k % 2 == 0;
    rs.push_back(make_record("p" + std::to_string(k), tb, false, {tb, false, false},
                             Split::train));
  }
  const auto a = assign_splits(rs, {0.6, 0.2, 0.2}, 3);
  const auto b = assign_splits(rs, {0.6, 0.2, 0.2}, 3);
  CHECK(a == b);
  std::array<std::array<int, 3>, 2> counts{};
  for (const auto& r : a) ++counts[r.label.tb()][static_cast<int>(r.split)];
  for (int t = 0; t < 2; ++t) {
    CHECK(counts[t][0] == doctest::Approx(30).epsilon(0.05));
    CHECK(counts[t][1] == doctest::Approx(10).epsilon(0.15));
    CHECK(counts[t][2] == doctest::Approx(10).epsilon(0.15));
  }
  CHECK(counts[0][0] + counts[1][0] == 60);
}
