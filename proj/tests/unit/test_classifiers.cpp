#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "tbx/classifiers.hpp"

using namespace tbx;
using namespace tbx::classifiers;

namespace {

nn::Tensor random_tensor(nn::Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  nn::Tensor t(shape);
  for (float& x : t.data()) x = u(rng);
  return t;
}

ModelInput view_input(ModalityTag tag, std::optional<nn::Tensor> pa,
                      std::optional<nn::Tensor> lat = std::nullopt) {
  ModelInput in;
  in.tag = tag;
  in.views[0] = std::move(pa);
  in.views[1] = std::move(lat);
  return in;
}

ModelInput stack_input(ModalityTag tag, nn::Tensor channels) {
  ModelInput in;
  in.tag = tag;
  in.channels = std::move(channels);
  return in;
}

}  // namespace

TEST_CASE("modality names round trip and channel counts") {
  for (ModalityTag tag : kAllModalities) {
    CHECK(parse_modality(to_string(tag)) == tag);
  }
  CHECK(to_string(ModalityTag::CT_B_XRAY) == "ct_b+xray");
  CHECK(row_label(ModalityTag::CT_B_XRAY) == "CT (B) + X-ray");
  CHECK_THROWS_AS(parse_modality("mri"), InvalidArgument);

  using preprocessing::SliceMode;
  CHECK(expected_channels(ModalityTag::CT_B_XRAY, SliceMode::TWO_SLICE, 64) == 3);
  CHECK(expected_channels(ModalityTag::CT_B, SliceMode::TWO_SLICE, 64) == 2);
  CHECK(expected_channels(ModalityTag::CT_SV, SliceMode::FULL, 64) == 64);
  CHECK(expected_channels(ModalityTag::CT_SV_XRAY, SliceMode::FULL, 64) == 65);
  CHECK_THROWS_AS(expected_channels(ModalityTag::XRAY_PA, SliceMode::FULL, 64),
                  InvalidArgument);

  CHECK(architecture_for(ModalityTag::XRAY_PA) == ArchitectureKind::multiview_2d);
  CHECK(architecture_for(ModalityTag::XRAY_PA_L) == ArchitectureKind::multiview_2d);
  CHECK(architecture_for(ModalityTag::CT_SV) == ArchitectureKind::slicestack_3d);
  CHECK(parse_architecture(to_string(ArchitectureKind::slicestack_3d)) ==
        ArchitectureKind::slicestack_3d);
}

TEST_CASE("fuse_inputs concatenates CT first and X-ray last") {
  const nn::Tensor ct = random_tensor({2, 1, 128, 128}, 1);
  const nn::Tensor x = random_tensor({1, 1, 128, 128}, 2);
  const nn::Tensor f = fuse_inputs(ct, x);
  CHECK(f.shape() == nn::Shape{3, 1, 128, 128});
  for (int h = 0; h < 128; h += 7) {
    for (int w = 0; w < 128; w += 5) {
      CHECK(f.at(0, 0, h, w) == ct.at(0, 0, h, w));
      CHECK(f.at(1, 0, h, w) == ct.at(1, 0, h, w));
      CHECK(f.at(2, 0, h, w) == x.at(0, 0, h, w));
    }
  }
  CHECK(fuse_inputs(random_tensor({64, 1, 128, 128}, 3), x).shape().c == 65);
  CHECK_THROWS_AS(fuse_inputs(ct, random_tensor({1, 1, 64, 128}, 4)), InvalidArgument);
}

TEST_CASE("bce_with_logits examples") {
  const float z0[] = {0.0f};
  const float t1[] = {1.0f};
  CHECK(bce_with_logits(z0, t1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const float z00[] = {0.0f, 0.0f};
  const float t10[] = {1.0f, 0.0f};
  CHECK(bce_with_logits(z00, t10) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // softplus(-20) = 2.0611536181902037e-9
  const float z20[] = {20.0f};
  CHECK(bce_with_logits(z20, t1) == doctest::Approx(2.0611536181902037e-9).epsilon(1e-9));

  const float big[] = {1000.0f, -1000.0f};
  const float tb[] = {0.0f, 1.0f};
  CHECK(bce_with_logits(big, tb) == doctest::Approx(1000.0));

  const float nan[] = {std::nanf("")};
  CHECK_THROWS_AS(bce_with_logits(nan, t1), InvalidArgument);
  const float half[] = {0.5f};
  CHECK_THROWS_AS(bce_with_logits(z0, half), InvalidArgument);
  CHECK_THROWS_AS(bce_with_logits(z00, t1), InvalidArgument);
}

TEST_CASE("bce gradient matches central differences and loss is nonnegative") {
  Rng rng(17);
  std::uniform_real_distribution<float> u(-8.0f, 8.0f);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 5;
    std::vector<float> z(static_cast<std::size_t>(n)), t(z.size());
    for (int i = 0; i < n; ++i) {
      z[static_cast<std::size_t>(i)] = u(rng);
      t[static_cast<std::size_t>(i)] = coin(rng) ? 1.0f : 0.0f;
    }
    CHECK(bce_with_logits(z, t) >= 0.0);
    const auto g = bce_with_logits_grad(z, t);
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      CHECK(g[k] == doctest::Approx((sigmoid(z[k]) - t[k]) / n).epsilon(1e-12));
    }
  }
}

TEST_CASE("predict thresholds at 0.5 or decodes argmax") {
  const float z0[] = {0.0f};
  auto p = predict_from_logits(z0);
  CHECK(p.probabilities[0] == 0.5);
  CHECK(p.labels[0] == 1);

  const float z3[] = {-3.0f, 3.0f, 0.0f};
  p = predict_from_logits(z3);
  CHECK(p.probabilities[0] == doctest::Approx(1.0 / (1.0 + std::exp(3.0))));
  CHECK(p.probabilities[1] == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));
  CHECK(p.labels == std::vector<int>{0, 1, 1});

  p = predict_from_logits(z3, true);
  CHECK(p.labels == std::vector<int>{0, 1, 0});

  const float wide[] = {-80.0f, 30.0f};
  p = predict_from_logits(wide);
  for (double q : p.probabilities) {
    CHECK(q > 0.0);
    CHECK(q <= 1.0);
  }
}

TEST_CASE("multiview_2d shape contract and missing views") {
  auto one = build_classifier(ArchitectureKind::multiview_2d, 1, 1, 5);
  CHECK(one.forward(view_input(ModalityTag::XRAY_PA, nn::Tensor({1, 1, 320, 320}))).size() ==
        1);

  auto two = build_classifier(ArchitectureKind::multiview_2d, 3, 2, 5);
  const nn::Tensor a = random_tensor({1, 1, 320, 320}, 8);
  const auto both = two.forward(view_input(ModalityTag::XRAY_PA_L, a, a));
  REQUIRE(both.size() == 3);
  const auto again = two.forward(view_input(ModalityTag::XRAY_PA_L, a, a));
  CHECK(both == again);

  const auto pa_only = two.forward(view_input(ModalityTag::XRAY_PA_L, a));
  REQUIRE(pa_only.size() == 3);
  for (float z : pa_only) CHECK(std::isfinite(z));

  CHECK_THROWS_AS(two.forward(view_input(ModalityTag::XRAY_PA_L, std::nullopt)),
                  InvalidArgument);
  CHECK_THROWS_AS(one.forward(view_input(ModalityTag::XRAY_PA, nn::Tensor({2, 1, 320, 320}))),
                  InvalidArgument);
  CHECK_THROWS_AS(build_classifier(ArchitectureKind::multiview_2d, 1, 3, 1), InvalidArgument);
  CHECK_THROWS_AS(build_classifier(ArchitectureKind::multiview_2d, 0, 1, 1), InvalidArgument);
}

TEST_CASE("slicestack_3d shape contract, planar and volumetric") {
  auto planar = build_classifier(ArchitectureKind::slicestack_3d, 3, 3, 9);
  const auto z = planar.forward(stack_input(ModalityTag::CT_B_XRAY, nn::Tensor({3, 1, 128, 128})));
  REQUIRE(z.size() == 3);
  for (float v : z) CHECK(std::isfinite(v));

  auto volumetric = build_classifier(ArchitectureKind::slicestack_3d, 1, 17, 9);
  const auto zv = volumetric.forward(
      stack_input(ModalityTag::CT_SV_XRAY, random_tensor({17, 1, 128, 128}, 3)));
  REQUIRE(zv.size() == 1);
  CHECK(std::isfinite(zv[0]));

  CHECK_THROWS_AS(planar.forward(stack_input(ModalityTag::CT_B, nn::Tensor({2, 1, 128, 128}))),
                  InvalidArgument);
  CHECK_THROWS_AS(build_classifier(ArchitectureKind::slicestack_3d, 1, 0, 1), InvalidArgument);
}

TEST_CASE("initialization is deterministic in the seed") {
  auto a = build_classifier(ArchitectureKind::slicestack_3d, 1, 3, 42);
  auto b = build_classifier(ArchitectureKind::slicestack_3d, 1, 3, 42);
  auto c = build_classifier(ArchitectureKind::slicestack_3d, 1, 3, 43);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());

  auto m1 = build_classifier(ArchitectureKind::multiview_2d, 1, 2, 7);
  auto m2 = build_classifier(ArchitectureKind::multiview_2d, 1, 2, 7);
  CHECK(m1.checksum() == m2.checksum());
}

TEST_CASE("backward accumulates parameter gradients consistent with finite differences") {
  auto model = build_classifier(ArchitectureKind::slicestack_3d, 1, 2, 3);
  const ModelInput in = stack_input(ModalityTag::CT_B, random_tensor({2, 1, 32, 32}, 4));
  const float target[] = {1.0f};

  auto params = model.parameters();
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  const auto z = model.forward(in);
  const auto g = bce_with_logits_grad(z, target);
  model.backward(g);

  // The head bias gradient equals dL/dz exactly.
  nn::Parameter* bias = params.back();
  REQUIRE(bias->value.size() == 1);
  CHECK(bias->grad[0] == doctest::Approx(g[0]).epsilon(1e-6));

  // Spot-check a few head weights with finite differences in float.
  nn::Parameter* w = params[params.size() - 2];
  int checked = 0;
  for (std::size_t i = 0; i < w->value.size() && checked < 6; i += 17, ++checked) {
    const float orig = w->value[i];
    const float h = 1e-2f;
    w->value[i] = orig + h;
    const double up = bce_with_logits(model.forward(in), target);
    w->value[i] = orig - h;
    const double down = bce_with_logits(model.forward(in), target);
    w->value[i] = orig;
    CHECK(w->grad[i] == doctest::Approx((up - down) / (2.0 * h)).epsilon(2e-3));
  }
}

TEST_CASE("checkpoint round trip preserves outputs") {
  test::TempDir dir("cls");
  auto model = build_classifier(ArchitectureKind::slicestack_3d, 3, 3, 11);
  const ModelInput in = stack_input(ModalityTag::CT_B_XRAY, random_tensor({3, 1, 64, 64}, 12));
  save_classifier(dir / "m.ckpt", model);
  auto loaded = load_classifier(dir / "m.ckpt");
  CHECK(loaded.kind() == ArchitectureKind::slicestack_3d);
  CHECK(loaded.n_outputs() == 3);
  CHECK(loaded.input_channels() == 3);
  CHECK(loaded.checksum() == model.checksum());
  CHECK(loaded.forward(in) == model.forward(in));

  test::write_file(dir / "bad.ckpt", "not a checkpoint");
  CHECK_THROWS_AS(load_classifier(dir / "bad.ckpt"), IoError);
  CHECK_THROWS_AS(load_classifier(dir / "missing.ckpt"), IoError);
}
