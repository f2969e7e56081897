#include "tbx/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tbx/image_io.hpp"

namespace tbx::phantom {

bool PhantomSpec::healthy() const {
  return std::none_of(findings.begin(), findings.end(), [](bool b) { return b; });
}

void PhantomSpec::validate() const {
  if (dims.depth <= 0 || dims.height <= 0 || dims.width <= 0) {
    throw InvalidArgument("phantom dims must be positive");
  }
  if (!(lung_baseline >= 0.0f && lung_baseline <= 1.0f)) {
    throw InvalidArgument("lung_baseline must lie in [0, 1]");
  }
  if (!(noise_sigma >= 0.0f) || !(noise_sigma < lung_baseline)) {
    throw InvalidArgument("noise_sigma must satisfy 0 <= sigma < lung_baseline");
  }
  if (sequelae && healthy()) {
    throw InvalidArgument("a sequelae phantom needs at least one finding");
  }
}

bool Ellipsoid::contains(double d, double h, double w) const {
  const double a = (d - cd) / rd;
  const double b = (h - ch) / rh;
  const double c = (w - cw) / rw;
  return a * a + b * b + c * c <= 1.0;
}

bool PhantomLayout::in_lung(int d, int h, int w) const {
  return lungs[0].contains(d, h, w) || lungs[1].contains(d, h, w);
}

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

class Canvas {
 public:
  explicit Canvas(Dims3 dims) : dims_(dims), v_(dims.count(), 0.0f) {}

  [[nodiscard]] bool inside(int d, int h, int w) const {
    return d >= 0 && h >= 0 && w >= 0 && d < dims_.depth && h < dims_.height &&
           w < dims_.width;
  }
  float& at(int d, int h, int w) {
    return v_[(static_cast<std::size_t>(d) * dims_.height + h) * dims_.width + w];
  }
  std::vector<float>& data() { return v_; }

 private:
  Dims3 dims_;
  std::vector<float> v_;
};

// Paints `value` on lung voxels inside the box around (cd,ch,cw) where
// `pred(dd,dh,dw)` holds for the offset from the center.
template <typename Pred>
void paint(Canvas& canvas, const PhantomLayout& layout, double cd, double ch,
           double cw, double reach, float value, Pred pred) {
  const int d0 = static_cast<int>(std::floor(cd - reach));
  const int d1 = static_cast<int>(std::ceil(cd + reach));
  const int h0 = static_cast<int>(std::floor(ch - reach));
  const int h1 = static_cast<int>(std::ceil(ch + reach));
  const int w0 = static_cast<int>(std::floor(cw - reach));
  const int w1 = static_cast<int>(std::ceil(cw + reach));
  for (int d = d0; d <= d1; ++d) {
    for (int h = h0; h <= h1; ++h) {
      for (int w = w0; w <= w1; ++w) {
        if (!canvas.inside(d, h, w) || !layout.in_lung(d, h, w)) continue;
        if (pred(d - cd, h - ch, w - cw)) canvas.at(d, h, w) = value;
      }
    }
  }
}

struct FindingPlacer {
  PhantomLayout& layout;
  Rng& rng;
  double center_depth;

  PlacedFinding place(Finding kind, FindingShape shape, double radius) {
    PlacedFinding f;
    f.kind = kind;
    f.shape = shape;
    f.radius = radius;
    for (int attempt = 0; attempt < 30; ++attempt) {
      f.lung = std::uniform_int_distribution<int>(0, 1)(rng);
      const Ellipsoid& lung = layout.lungs[f.lung];
      double u = 0, v = 0;
      do {
        u = uniform(rng, -1.0, 1.0);
        v = uniform(rng, -1.0, 1.0);
      } while (u * u + v * v > 1.0);
      // Depth center stays within radius/2 of the mid-plane so the finding
      // crosses the central slices.
      f.cd = center_depth + uniform(rng, -radius / 2, radius / 2);
      f.ch = lung.ch + u * std::max(lung.rh - radius - 1.0, 0.0);
      f.cw = lung.cw + v * std::max(lung.rw - radius - 1.0, 0.0);
      const bool clear = std::none_of(
          layout.findings.begin(), layout.findings.end(),
          [&](const PlacedFinding& o) {
            const double dist = std::hypot(o.cd - f.cd, o.ch - f.ch, o.cw - f.cw);
            return dist < o.radius + f.radius + 2.0;
          });
      if (clear) break;
    }
    layout.findings.push_back(f);
    return f;
  }
};

void draw_streaks(Canvas& canvas, PhantomLayout& layout, Rng& rng,
                  const PhantomSpec& spec, double center_depth) {
  const int count = std::uniform_int_distribution<int>(3, 5)(rng);
  const float value = spec.lung_baseline + kStreakOffset;
  const int dmid = static_cast<int>(std::lround(center_depth));
  for (int s = 0; s < count; ++s) {
    const Ellipsoid& lung = layout.lungs[std::uniform_int_distribution<int>(0, 1)(rng)];
    // Upper half of the lung (smaller h index is apical).
    const double h_start = lung.ch - uniform(rng, 0.1, 0.7) * lung.rh;
    const double w_start = lung.cw + uniform(rng, -0.6, 0.6) * lung.rw;
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double length = uniform(rng, 0.4, 0.9) * std::max(lung.rh, lung.rw);
    const int steps = static_cast<int>(std::ceil(length * 2.0));
    for (int k = 0; k <= steps; ++k) {
      const double t = 0.5 * k;
      const int h = static_cast<int>(std::lround(h_start + t * std::sin(angle)));
      const int w = static_cast<int>(std::lround(w_start + t * std::cos(angle)));
      for (int d = dmid - 3; d <= dmid + 3; ++d) {
        if (canvas.inside(d, h, w) && layout.in_lung(d, h, w)) {
          canvas.at(d, h, w) = value;
        }
      }
    }
  }
  layout.streaks = count;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Dims3 dims = spec.dims;
  const double D = dims.depth, H = dims.height, W = dims.width;
  const double cd = (D - 1) / 2.0, ch = (H - 1) / 2.0, cw = (W - 1) / 2.0;

  Rng rng(derive_seed(spec.seed, 0));
  PhantomLayout layout;
  layout.body = {cd, ch, cw, 0.9 * D, 0.9 * H, 0.9 * W};
  for (int i = 0; i < 2; ++i) {
    const double side = i == 0 ? -1.0 : 1.0;
    layout.lungs[i] = {cd,
                       ch - 0.02 * H,
                       cw + side * 0.2 * W,
                       0.32 * D,
                       0.33 * H,
                       0.15 * W};
  }
  if (spec.sequelae) {
    // Lung volume shrinks by the factor; the base stays put, the apex drops.
    layout.lung_shrink = uniform(rng, 0.8, 0.9);
    for (auto& lung : layout.lungs) {
      const double base = lung.ch + lung.rh;
      lung.rh *= layout.lung_shrink;
      lung.ch = base - lung.rh;
    }
  }

  Canvas canvas(dims);
  for (int d = 0; d < dims.depth; ++d) {
    for (int h = 0; h < dims.height; ++h) {
      for (int w = 0; w < dims.width; ++w) {
        float v = 0.0f;
        if (layout.in_lung(d, h, w)) {
          v = spec.lung_baseline;
        } else if (layout.body.contains(d, h, w)) {
          v = spec.lung_baseline + kBodyOffset;
        }
        canvas.at(d, h, w) = v;
      }
    }
  }

  if (spec.sequelae) draw_streaks(canvas, layout, rng, spec, cd);

  FindingPlacer placer{layout, rng, cd};
  const float base = spec.lung_baseline;
  if (spec.findings[static_cast<std::size_t>(Finding::granuloma)]) {
    const auto f = placer.place(Finding::granuloma, FindingShape::ball,
                                uniform(rng, 2.0, 5.0));
    paint(canvas, layout, f.cd, f.ch, f.cw, f.radius, base + kGranulomaOffset,
          [r = f.radius](double a, double b, double c) {
            return a * a + b * b + c * c <= r * r;
          });
  }
  if (spec.findings[static_cast<std::size_t>(Finding::cavitation)]) {
    const auto f = placer.place(Finding::cavitation, FindingShape::ball,
                                uniform(rng, 4.0, 10.0));
    paint(canvas, layout, f.cd, f.ch, f.cw, f.radius, base + kCavityOffset,
          [r = f.radius](double a, double b, double c) {
            return a * a + b * b + c * c <= r * r;
          });
  }
  if (spec.findings[static_cast<std::size_t>(Finding::calcification)]) {
    const bool shell = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
    const float value = base + kCalcificationOffset;
    if (shell) {
      // A band of half-width 0.45 has no voxel whose six neighbours are all
      // inside it for radius >= 3, which separates it from a solid nodule.
      const auto f = placer.place(Finding::calcification, FindingShape::shell,
                                  uniform(rng, 3.0, 6.0));
      paint(canvas, layout, f.cd, f.ch, f.cw, f.radius + 1.0, value,
            [r = f.radius](double a, double b, double c) {
              return std::abs(std::sqrt(a * a + b * b + c * c) - r) <= 0.45;
            });
    } else {
      const auto f = placer.place(Finding::calcification, FindingShape::flecks, 5.0);
      // Columns of 2x2x2 flecks on a 3-voxel lattice so no two touch.
      const int n_columns = std::uniform_int_distribution<int>(4, 6)(rng);
      std::vector<std::array<int, 2>> cells;
      for (int b = -1; b <= 1; ++b)
        for (int c = -1; c <= 1; ++c) cells.push_back({b, c});
      std::shuffle(cells.begin(), cells.end(), rng);
      const int od = static_cast<int>(std::lround(f.cd));
      const int oh = static_cast<int>(std::lround(f.ch));
      const int ow = static_cast<int>(std::lround(f.cw));
      for (int k = 0; k < n_columns; ++k) {
        const auto& cell = cells[static_cast<std::size_t>(k)];
        const int h0 = oh + 3 * cell[0], w0 = ow + 3 * cell[1];
        for (int layer = -1; layer <= 1; ++layer) {
          const int d0 = od + 3 * layer - 1;
          for (int d = d0; d < d0 + 2; ++d)
            for (int h = h0; h < h0 + 2; ++h)
              for (int w = w0; w < w0 + 2; ++w)
                if (canvas.inside(d, h, w) && layout.in_lung(d, h, w))
                  canvas.at(d, h, w) = value;
        }
      }
    }
  }

  if (spec.noise_sigma > 0.0f) {
    Rng noise_rng(derive_seed(spec.seed, 1));
    std::normal_distribution<float> noise(0.0f, spec.noise_sigma);
    const float limit = 3.0f * spec.noise_sigma;
    for (float& v : canvas.data()) {
      v += std::clamp(noise(noise_rng), -limit, limit);
    }
  }

  DiseaseLabel label(!spec.healthy(), spec.sequelae, spec.findings);
  return {Volume3D(dims, std::move(canvas.data()), Provenance::phantom), label,
          std::move(layout)};
}

ImagePlane2D drr_project(const Volume3D& volume, ProjectionAxis axis) {
  const auto [D, H, W] = volume.dims();
  const auto vox = volume.voxels();
  if (axis == ProjectionAxis::depth) {
    std::vector<double> acc(static_cast<std::size_t>(H) * W, 0.0);
    for (int d = 0; d < D; ++d) {
      const float* slice = vox.data() + static_cast<std::size_t>(d) * H * W;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += slice[i];
    }
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
      out[i] = static_cast<float>(acc[i] / D);
    }
    return ImagePlane2D(W, H, std::move(out));
  }
  std::vector<float> out(static_cast<std::size_t>(H) * D);
  for (int d = 0; d < D; ++d) {
    for (int h = 0; h < H; ++h) {
      const float* row = vox.data() + (static_cast<std::size_t>(d) * H + h) * W;
      double sum = 0.0;
      for (int w = 0; w < W; ++w) sum += row[w];
      out[static_cast<std::size_t>(h) * D + d] = static_cast<float>(sum / W);
    }
  }
  return ImagePlane2D(D, H, std::move(out));
}

ClassMix default_class_mix() {
  return {{"healthy", 0.5},  {"granuloma", 0.1}, {"cavitation", 0.1},
          {"calcification", 0.1}, {"mixed", 0.1}, {"sequelae", 0.1}};
}

fs::path corpus_volume_path(const fs::path& corpus_dir,
                            const std::string& patient_id) {
  return corpus_dir / "vol" / (patient_id + ".vol");
}

namespace {

PhantomSpec spec_for_class(const std::string& cls, Rng& rng) {
  PhantomSpec spec;
  auto random_finding = [&] {
    return std::uniform_int_distribution<std::size_t>(0, kFindingCount - 1)(rng);
  };
  if (cls == "healthy") return spec;
  if (cls == "granuloma") {
    spec.findings[0] = true;
  } else if (cls == "cavitation") {
    spec.findings[1] = true;
  } else if (cls == "calcification") {
    spec.findings[2] = true;
  } else if (cls == "mixed") {
    const auto first = random_finding();
    auto second = random_finding();
    while (second == first) second = random_finding();
    spec.findings[first] = spec.findings[second] = true;
  } else if (cls == "sequelae") {
    spec.sequelae = true;
    spec.findings[random_finding()] = true;
  } else if (cls == "tb") {
    spec.findings[random_finding()] = true;
  } else {
    throw InvalidArgument("unknown phantom class '" + cls + "'");
  }
  return spec;
}

std::string padded_id(std::size_t index, std::size_t total) {
  std::string digits = std::to_string(index);
  const std::size_t width = std::max<std::size_t>(4, std::to_string(total).size());
  return "ph" + std::string(width - std::min(width, digits.size()), '0') + digits;
}

}  // namespace

fs::path build_phantom_corpus(const CorpusOptions& options) {
  if (options.n == 0) throw InvalidArgument("corpus size must be positive");
  std::vector<double> proportions;
  for (const auto& [name, p] : options.class_mix) {
    const auto& known = corpus_class_names();
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      throw InvalidArgument("unknown phantom class '" + name + "'");
    }
    proportions.push_back(p);
  }
  const auto class_counts = largest_remainder(options.n, proportions);
  // Validates the split ratios before any file is written.
  largest_remainder(options.n, options.split_ratios);

  const fs::path img_dir = options.out_dir / "img";
  const fs::path vol_dir = options.out_dir / "vol";
  try {
    fs::create_directories(img_dir);
    fs::create_directories(vol_dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create corpus directory: " + std::string(e.what()));
  }

  std::vector<std::string> classes;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    classes.insert(classes.end(), class_counts[c], options.class_mix[c].first);
  }
  Rng order_rng(derive_seed(options.seed, 11));
  std::shuffle(classes.begin(), classes.end(), order_rng);

  std::vector<PatientRecord> records;
  records.reserve(options.n);
  for (std::size_t i = 0; i < options.n; ++i) {
    Rng class_rng(derive_seed(options.seed, 100000 + i));
    PhantomSpec spec = spec_for_class(classes[i], class_rng);
    spec.dims = options.dims;
    spec.lung_baseline = options.lung_baseline;
    spec.noise_sigma = options.noise_sigma;
    spec.seed = derive_seed(options.seed, 200000 + i);
    const Phantom ph = generate_phantom(spec);

    PatientRecord rec;
    rec.patient_id = padded_id(i, options.n);
    rec.pa_image = fs::path("img") / (rec.patient_id + "_pa.png");
    rec.lateral_image = fs::path("img") / (rec.patient_id + "_l.png");
    rec.label = ph.label;

    io::write_volume(corpus_volume_path(options.out_dir, rec.patient_id), ph.volume);
    io::write_png16(options.out_dir / *rec.pa_image,
                    drr_project(ph.volume, ProjectionAxis::depth));
    io::write_png16(options.out_dir / *rec.lateral_image,
                    drr_project(ph.volume, ProjectionAxis::width));
    records.push_back(std::move(rec));
  }

  records = assign_splits(std::move(records), options.split_ratios,
                          derive_seed(options.seed, 13));
  const fs::path manifest = options.out_dir / "manifest.csv";
  write_manifest(manifest, records);
  return manifest;
}

}  // namespace tbx::phantom
