#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "tbx/ct_synthesis.hpp"
#include "tbx/image_io.hpp"
#include "tbx/phantom.hpp"

using namespace tbx;
using namespace tbx::synthesis;

namespace {

constexpr Dims3 kSmall{16, 32, 32};

TrainingPair phantom_pair(std::uint64_t seed, bool cavity) {
  phantom::PhantomSpec spec;
  spec.dims = kSmall;
  spec.seed = seed;
  spec.findings[static_cast<std::size_t>(Finding::cavitation)] = cavity;
  const auto ph = phantom::generate_phantom(spec);
  return {"p" + std::to_string(seed),
          phantom::drr_project(ph.volume, phantom::ProjectionAxis::depth),
          phantom::drr_project(ph.volume, phantom::ProjectionAxis::width), ph.volume};
}

std::vector<TrainingPair> phantom_pairs(int n, std::uint64_t first) {
  std::vector<TrainingPair> out;
  for (int i = 0; i < n; ++i) out.push_back(phantom_pair(first + i, i % 2 == 1));
  return out;
}

double max_abs_diff(const Volume3D& a, const Volume3D& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.voxels().size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.voxels()[i]) - b.voxels()[i]));
  }
  return m;
}

ImagePlane2D constant_plane(int w, int h, float v) {
  return ImagePlane2D(w, h, std::vector<float>(static_cast<std::size_t>(w) * h, v));
}

// Returns voxels outside [0, 1] so the contract clamp is observable.
class WildGenerator : public CTGenerator {
 public:
  [[nodiscard]] GeneratorMode mode() const override { return GeneratorMode::SV; }
  [[nodiscard]] Dims3 output_dims() const override { return {2, 2, 2}; }
  [[nodiscard]] Volume3D generate(const GeneratorInput&) const override {
    return {{2, 2, 2}, {-1.0f, 0.0f, 0.25f, 0.5f, 0.75f, 1.0f, 2.0f, 0.5f},
            Provenance::external};
  }
};

class WrongDimsGenerator : public WildGenerator {
 public:
  [[nodiscard]] Dims3 output_dims() const override { return {4, 4, 4}; }
};

}  // namespace

TEST_CASE("generator mode names") {
  CHECK(to_string(GeneratorMode::SV) == "SV");
  CHECK(parse_generator_mode("b") == GeneratorMode::B);
  CHECK(parse_generator_mode("Sv") == GeneratorMode::SV);
  CHECK_THROWS_AS(parse_generator_mode("C"), InvalidArgument);
  CHECK(provenance_for(GeneratorMode::SV) == Provenance::generated_sv);
  CHECK(provenance_for(GeneratorMode::B) == Provenance::generated_b);
}

TEST_CASE("synthesize_ct enforces the output contract") {
  const ImagePlane2D pa = constant_plane(128, 128, 0.4f);
  const ImagePlane2D lat = constant_plane(128, 128, 0.6f);

  ToyGenerator sv(GeneratorMode::SV, {64, 128, 128}, 1);
  const Volume3D v = synthesize_ct(sv, pa, std::nullopt);
  CHECK(v.dims() == Dims3{64, 128, 128});
  CHECK(v.provenance() == Provenance::generated_sv);
  CHECK(synthesize_ct(sv, pa, std::nullopt) == v);
  CHECK(std::all_of(v.voxels().begin(), v.voxels().end(),
                    [](float x) { return x >= 0.0f && x <= 1.0f; }));

  ToyGenerator b(GeneratorMode::B, kSmall, 1);
  CHECK(synthesize_ct(b, pa, lat).provenance() == Provenance::generated_b);
  try {
    (void)synthesize_ct(b, pa, std::nullopt);
    FAIL("expected an error");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()) == "biplanar generator requires lateral view");
  }
  CHECK_THROWS_AS(synthesize_ct(sv, ImagePlane2D{}, std::nullopt), InvalidArgument);

  const Volume3D clamped = synthesize_ct(WildGenerator{}, pa, std::nullopt);
  CHECK(clamped.voxels()[0] == 0.0f);
  CHECK(clamped.voxels()[6] == 1.0f);
  CHECK(clamped.voxels()[2] == 0.25f);
  CHECK(clamped.provenance() == Provenance::generated_sv);
  CHECK_THROWS_AS(synthesize_ct(WrongDimsGenerator{}, pa, std::nullopt), Error);
}

TEST_CASE("SV ignores the lateral view and B uses it") {
  const auto pair = phantom_pair(3, true);
  const ImagePlane2D other_lat = constant_plane(pair.lateral.width(), pair.lateral.height(), 0.9f);

  ToyGenerator sv(GeneratorMode::SV, kSmall, 2);
  CHECK(synthesize_ct(sv, pair.pa, pair.lateral) == synthesize_ct(sv, pair.pa, other_lat));

  ToyGenerator b(GeneratorMode::B, kSmall, 2);
  CHECK(max_abs_diff(synthesize_ct(b, pair.pa, pair.lateral),
                     synthesize_ct(b, pair.pa, other_lat)) > 0.0);
}

TEST_CASE("projection consistency") {
  const auto pair = phantom_pair(5, true);
  CHECK(projection_consistency(pair.volume, pair.pa) == doctest::Approx(1.0).epsilon(1e-9));

  ScopedWarningCapture capture;
  CHECK(projection_consistency(pair.volume, constant_plane(32, 32, 0.3f)) == 0.0);
  CHECK(capture.count() == 1);

  CHECK_THROWS_AS(projection_consistency(pair.volume, constant_plane(16, 32, 0.3f)),
                  InvalidArgument);
}

TEST_CASE("toy generator training reduces error and is deterministic") {
  const auto pairs = phantom_pairs(16, 100);
  ToyGeneratorConfig cfg;
  cfg.mode = GeneratorMode::B;
  cfg.epochs = 4;
  cfg.seed = 9;
  auto fit = train_toy_generator(pairs, cfg);
  REQUIRE(fit.epoch_loss.size() == 4);
  for (double l : fit.epoch_loss) CHECK(std::isfinite(l));
  CHECK(fit.final_mse < fit.initial_mse);
  CHECK(fit.final_mse == doctest::Approx(reconstruction_mse(fit.generator, pairs)));

  auto again = train_toy_generator(pairs, cfg);
  CHECK(again.generator.checksum() == fit.generator.checksum());

  test::TempDir dir("gen");
  fit.generator.save(dir / "g.ckpt");
  auto loaded = ToyGenerator::load(dir / "g.ckpt");
  CHECK(loaded.mode() == GeneratorMode::B);
  CHECK(loaded.output_dims() == kSmall);
  CHECK(loaded.checksum() == fit.generator.checksum());
  CHECK(synthesize_ct(loaded, pairs[0].pa, pairs[0].lateral) ==
        synthesize_ct(fit.generator, pairs[0].pa, pairs[0].lateral));

  auto via_loader = load_generator(dir / "g.ckpt");
  CHECK(via_loader->mode() == GeneratorMode::B);
  CHECK_THROWS_AS(load_generator(dir / "g.ckpt", GeneratorMode::SV), InvalidArgument);
  CHECK_THROWS_AS(load_generator(dir / "nope.ckpt"), IoError);
}

TEST_CASE("toy generator training preconditions") {
  ToyGeneratorConfig cfg;
  CHECK_THROWS_AS(train_toy_generator({}, cfg), InvalidArgument);
  const auto few = phantom_pairs(15, 1);
  CHECK_THROWS_AS(train_toy_generator(few, cfg), InvalidArgument);

  auto pairs = phantom_pairs(16, 1);
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_toy_generator(pairs, cfg), InvalidArgument);
  cfg.epochs = 1;
  cfg.learning_rate = 1e9;
  CHECK_THROWS_AS(train_toy_generator(pairs, cfg), TrainingError);
}

TEST_CASE("disk generator serves, clamps and restamps volumes") {
  test::TempDir dir("disk");
  const Volume3D stored({2, 2, 2}, {-0.5f, 0.0f, 0.5f, 1.0f, 1.5f, 0.25f, 0.75f, 0.1f},
                        Provenance::external);
  io::write_volume(dir / "alice.vol", stored);

  DiskGenerator gen(dir.path(), GeneratorMode::B);
  CHECK(gen.output_dims() == Dims3{2, 2, 2});
  const ImagePlane2D img = constant_plane(4, 4, 0.5f);
  const Volume3D v = synthesize_ct(gen, img, img, "alice");
  CHECK(v.provenance() == Provenance::generated_b);
  CHECK(v.voxels()[0] == 0.0f);
  CHECK(v.voxels()[4] == 1.0f);
  CHECK(v.voxels()[2] == 0.5f);

  CHECK_THROWS_AS(synthesize_ct(gen, img, img, ""), InvalidArgument);
  CHECK_THROWS_AS(synthesize_ct(gen, img, img, "bob"), IoError);
  CHECK_THROWS_AS(synthesize_ct(gen, img, std::nullopt, "alice"), InvalidArgument);
  CHECK_THROWS_AS(DiskGenerator(dir / "missing", GeneratorMode::SV), IoError);

  CHECK(load_generator(dir.path(), GeneratorMode::SV)->mode() == GeneratorMode::SV);
  CHECK_THROWS_AS(load_generator(dir.path()), InvalidArgument);
}
