#include "tbx/ct_synthesis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <numeric>

#include <json.hpp>

#include "tbx/image_io.hpp"
#include "tbx/phantom.hpp"
#include "tbx/preprocessing.hpp"

namespace tbx::synthesis {

std::string_view to_string(GeneratorMode mode) {
  return mode == GeneratorMode::SV ? "SV" : "B";
}

GeneratorMode parse_generator_mode(std::string_view text) {
  std::string upper(text);
  for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (upper == "SV") return GeneratorMode::SV;
  if (upper == "B") return GeneratorMode::B;
  throw InvalidArgument("unknown generator mode '" + std::string(text) + "'");
}

Provenance provenance_for(GeneratorMode mode) {
  return mode == GeneratorMode::SV ? Provenance::generated_sv : Provenance::generated_b;
}

Volume3D synthesize_ct(const CTGenerator& gen, const ImagePlane2D& pa,
                       const std::optional<ImagePlane2D>& lateral,
                       const std::string& patient_id) {
  if (pa.empty()) throw InvalidArgument("synthesis needs a PA view");
  GeneratorInput in{patient_id, pa, std::nullopt};
  if (gen.mode() == GeneratorMode::B) {
    if (!lateral || lateral->empty()) {
      throw InvalidArgument("biplanar generator requires lateral view");
    }
    in.lateral = lateral;
  }
  const Volume3D raw = gen.generate(in);
  const Dims3 want = gen.output_dims();
  if (want.count() != 0 && raw.dims() != want) {
    throw Error("generator produced " + to_string(raw.dims()) + ", expected " +
                to_string(want));
  }
  std::vector<float> vox(raw.voxels().begin(), raw.voxels().end());
  for (float& v : vox) {
    if (!std::isfinite(v)) throw Error("generator produced a non-finite voxel");
    v = std::clamp(v, 0.0f, 1.0f);
  }
  return {raw.dims(), std::move(vox), provenance_for(gen.mode())};
}

namespace {

struct Tap {
  int i0, i1;
  float frac;
};

// Half-pixel-center linear taps; negative source coordinates clamp to 0.
std::vector<Tap> linear_taps(int in, int out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double s = std::max(0.0, (o + 0.5) * scale - 0.5);
    const int i0 = std::min(static_cast<int>(s), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(s - i0)};
  }
  return t;
}

class Reshape : public nn::Layer {
 public:
  explicit Reshape(nn::Shape to) : to_(to) {}
  nn::Tensor forward(const nn::Tensor& input) override {
    from_ = input.shape();
    return input.reshaped(to_);
  }
  nn::Tensor backward(const nn::Tensor& grad) override { return grad.reshaped(from_); }

 private:
  nn::Shape to_, from_;
};

class Upsample3D : public nn::Layer {
 public:
  explicit Upsample3D(Dims3 out) : out_(out) {}

  nn::Tensor forward(const nn::Tensor& input) override {
    in_ = input.shape();
    td_ = linear_taps(in_.d, out_.depth);
    th_ = linear_taps(in_.h, out_.height);
    tw_ = linear_taps(in_.w, out_.width);
    nn::Tensor out(nn::Shape{in_.c, out_.depth, out_.height, out_.width});
    float* o = out.data().data();
    for (int c = 0; c < in_.c; ++c) {
      for (const Tap& a : td_) {
        for (const Tap& b : th_) {
          const auto row = [&](int d, int h) {
            return input.data().data() +
                   ((static_cast<std::size_t>(c) * in_.d + d) * in_.h + h) * in_.w;
          };
          const float* r00 = row(a.i0, b.i0);
          const float* r01 = row(a.i0, b.i1);
          const float* r10 = row(a.i1, b.i0);
          const float* r11 = row(a.i1, b.i1);
          for (const Tap& e : tw_) {
            const auto lerp = [&](const float* r) {
              return r[e.i0] + (r[e.i1] - r[e.i0]) * e.frac;
            };
            const float v0 = lerp(r00) + (lerp(r01) - lerp(r00)) * b.frac;
            const float v1 = lerp(r10) + (lerp(r11) - lerp(r10)) * b.frac;
            *o++ = v0 + (v1 - v0) * a.frac;
          }
        }
      }
    }
    return out;
  }

  nn::Tensor backward(const nn::Tensor& grad) override {
    nn::Tensor gin(in_);
    const float* g = grad.data().data();
    for (int c = 0; c < in_.c; ++c) {
      for (const Tap& a : td_) {
        for (const Tap& b : th_) {
          float* r00 = &gin.at(c, a.i0, b.i0, 0);
          float* r01 = &gin.at(c, a.i0, b.i1, 0);
          float* r10 = &gin.at(c, a.i1, b.i0, 0);
          float* r11 = &gin.at(c, a.i1, b.i1, 0);
          const float w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
          const float w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
          for (const Tap& e : tw_) {
            const float gv = *g++;
            const float l = gv * (1 - e.frac), r = gv * e.frac;
            r00[e.i0] += w00 * l; r00[e.i1] += w00 * r;
            r01[e.i0] += w01 * l; r01[e.i1] += w01 * r;
            r10[e.i0] += w10 * l; r10[e.i1] += w10 * r;
            r11[e.i0] += w11 * l; r11[e.i1] += w11 * r;
          }
        }
      }
    }
    return gin;
  }

 private:
  Dims3 out_;
  nn::Shape in_;
  std::vector<Tap> td_, th_, tw_;
};

constexpr int kLatentPerView = 32;
constexpr int kCoarseChannels = 4;

int ceil_div(int a, int b) { return (a + b - 1) / b; }

std::unique_ptr<nn::Sequential> view_encoder(const std::string& prefix) {
  auto seq = std::make_unique<nn::Sequential>();
  const int pooled = kGeneratorInputSize / 16;
  seq->add(nn::Conv::conv2d(1, 8, 3, 2, 1, prefix + ".conv1"))
      .add(std::make_unique<nn::ReLU>())
      .add(nn::Conv::conv2d(8, 16, 3, 2, 1, prefix + ".conv2"))
      .add(std::make_unique<nn::ReLU>())
      .add(nn::Conv::conv2d(16, 16, 3, 2, 1, prefix + ".conv3"))
      .add(std::make_unique<nn::ReLU>())
      .add(std::make_unique<nn::AvgPool>(nn::Triple{1, 2, 2}))
      .add(std::make_unique<nn::Linear>(16 * pooled * pooled, kLatentPerView,
                                        prefix + ".fc"))
      .add(std::make_unique<nn::ReLU>());
  return seq;
}

std::vector<float> resized_plane(const ImagePlane2D& img, int height, int width) {
  auto g = preprocessing::resize_bilinear(preprocessing::to_grid(img), height, width);
  for (float& v : g.values) v = std::clamp(v, 0.0f, 1.0f);
  return std::move(g.values);
}

}  // namespace

struct ToyGenerator::Impl {
  GeneratorMode mode;
  Dims3 dims;
  std::vector<std::unique_ptr<nn::Sequential>> encoders;
  nn::Sequential decoder;
  nn::Parameter alpha, beta, bias;
  std::mutex mu;
  std::vector<float> pred;

  struct Prepared {
    nn::Tensor pa_in, lat_in;
    std::vector<float> pa_plane;   // H x W
    std::vector<float> lat_plane;  // H x D
  };

  Impl(GeneratorMode m, Dims3 d)
      : mode(m),
        dims(d),
        alpha("backproject.alpha", static_cast<std::size_t>(d.depth)),
        beta("backproject.beta", static_cast<std::size_t>(d.width)),
        bias("backproject.bias", 1) {
    if (d.depth < 1 || d.height < 1 || d.width < 1) {
      throw InvalidArgument("generator output dims must be positive");
    }
    const int views = m == GeneratorMode::B ? 2 : 1;
    for (int v = 0; v < views; ++v) {
      encoders.push_back(view_encoder(v == 0 ? "enc_pa" : "enc_lat"));
    }
    const nn::Shape coarse{kCoarseChannels, ceil_div(d.depth, 8), ceil_div(d.height, 8),
                           ceil_div(d.width, 8)};
    decoder.add(std::make_unique<nn::Linear>(views * kLatentPerView,
                                             static_cast<int>(coarse.size()), "dec.fc"))
        .add(std::make_unique<nn::ReLU>())
        .add(std::make_unique<Reshape>(coarse))
        .add(nn::Conv::conv3d(kCoarseChannels, 1, 3, 1, 1, "dec.conv"))
        .add(std::make_unique<Upsample3D>(d));
  }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> out;
    for (auto& e : encoders) e->collect_parameters(out);
    decoder.collect_parameters(out);
    out.push_back(&alpha);
    if (mode == GeneratorMode::B) out.push_back(&beta);
    out.push_back(&bias);
    return out;
  }

  Prepared prepare(const ImagePlane2D& pa, const ImagePlane2D* lat) const {
    constexpr int n = kGeneratorInputSize;
    Prepared p;
    p.pa_in = nn::Tensor(nn::Shape{1, 1, n, n}, resized_plane(pa, n, n));
    p.pa_plane = resized_plane(pa, dims.height, dims.width);
    if (mode == GeneratorMode::B) {
      if (lat == nullptr || lat->empty()) {
        throw InvalidArgument("biplanar generator requires lateral view");
      }
      p.lat_in = nn::Tensor(nn::Shape{1, 1, n, n}, resized_plane(*lat, n, n));
      p.lat_plane = resized_plane(*lat, dims.height, dims.depth);
    }
    return p;
  }

  const std::vector<float>& forward(const Prepared& p) {
    std::vector<float> latent;
    const nn::Tensor e0 = encoders[0]->forward(p.pa_in);
    latent.assign(e0.data().begin(), e0.data().end());
    if (mode == GeneratorMode::B) {
      const nn::Tensor e1 = encoders[1]->forward(p.lat_in);
      latent.insert(latent.end(), e1.data().begin(), e1.data().end());
    }
    const auto n_latent = static_cast<int>(latent.size());
    const nn::Tensor up = decoder.forward(nn::Tensor(nn::Shape{n_latent}, std::move(latent)));

    const int D = dims.depth, H = dims.height, W = dims.width;
    pred.resize(dims.count());
    const bool b = mode == GeneratorMode::B;
    for (int d = 0; d < D; ++d) {
      for (int h = 0; h < H; ++h) {
        const std::size_t row = (static_cast<std::size_t>(d) * H + h) * W;
        const float lat = b ? p.lat_plane[static_cast<std::size_t>(h) * D + d] : 0.0f;
        for (int w = 0; w < W; ++w) {
          float s = up[row + w] + alpha.value[d] * p.pa_plane[static_cast<std::size_t>(h) * W + w] +
                    bias.value[0];
          if (b) s += beta.value[w] * lat;
          pred[row + w] = 1.0f / (1.0f + std::exp(-s));
        }
      }
    }
    return pred;
  }

  // Accumulates gradients for d(loss)/d(pred) of the last forward().
  void backward(const Prepared& p, std::span<const float> grad_pred) {
    const int D = dims.depth, H = dims.height, W = dims.width;
    const bool b = mode == GeneratorMode::B;
    nn::Tensor gs(nn::Shape{1, D, H, W});
    double gbias = 0.0;
    for (int d = 0; d < D; ++d) {
      double ga = 0.0;
      for (int h = 0; h < H; ++h) {
        const std::size_t row = (static_cast<std::size_t>(d) * H + h) * W;
        const float lat = b ? p.lat_plane[static_cast<std::size_t>(h) * D + d] : 0.0f;
        for (int w = 0; w < W; ++w) {
          const float y = pred[row + w];
          const float g = grad_pred[row + w] * y * (1.0f - y);
          gs[row + w] = g;
          ga += static_cast<double>(g) * p.pa_plane[static_cast<std::size_t>(h) * W + w];
          if (b) beta.grad[w] += g * lat;
          gbias += g;
        }
      }
      alpha.grad[d] += static_cast<float>(ga);
    }
    bias.grad[0] += static_cast<float>(gbias);
    const nn::Tensor glat = decoder.backward(gs);
    nn::Tensor g0(nn::Shape{kLatentPerView});
    std::copy_n(glat.data().begin(), kLatentPerView, g0.data().begin());
    encoders[0]->backward(g0);
    if (b) {
      nn::Tensor g1(nn::Shape{kLatentPerView});
      std::copy_n(glat.data().begin() + kLatentPerView, kLatentPerView, g1.data().begin());
      encoders[1]->backward(g1);
    }
  }
};

ToyGenerator::ToyGenerator(GeneratorMode mode, Dims3 output_dims, std::uint64_t seed)
    : impl_(std::make_unique<Impl>(mode, output_dims)) {
  Rng rng(derive_seed(seed, 0x67656e));
  for (auto& e : impl_->encoders) nn::init_layers(*e, rng);
  nn::init_layers(impl_->decoder, rng);
}

ToyGenerator::~ToyGenerator() = default;
ToyGenerator::ToyGenerator(ToyGenerator&&) noexcept = default;
ToyGenerator& ToyGenerator::operator=(ToyGenerator&&) noexcept = default;

GeneratorMode ToyGenerator::mode() const { return impl_->mode; }
Dims3 ToyGenerator::output_dims() const { return impl_->dims; }

Volume3D ToyGenerator::generate(const GeneratorInput& input) const {
  const Impl::Prepared p =
      impl_->prepare(input.pa, input.lateral ? &*input.lateral : nullptr);
  std::lock_guard lock(impl_->mu);
  return {impl_->dims, impl_->forward(p), provenance_for(impl_->mode)};
}

std::vector<nn::Parameter*> ToyGenerator::parameters() { return impl_->parameters(); }

std::uint64_t ToyGenerator::checksum() { return nn::checksum(parameters()); }

void ToyGenerator::save(const fs::path& path) {
  nlohmann::ordered_json header;
  header["mode"] = to_string(impl_->mode);
  header["output_dims"] = {impl_->dims.depth, impl_->dims.height, impl_->dims.width};
  header["format_version"] = 1;
  io::write_checkpoint(path, {header.dump(), nn::flatten_values(parameters())});
}

ToyGenerator ToyGenerator::load(const fs::path& path) {
  const io::Checkpoint ck = io::read_checkpoint(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ck.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad generator checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("format_version", 0) != 1 || !header.contains("mode") ||
      !header.contains("output_dims")) {
    throw IoError(path.string() + " is not a generator checkpoint");
  }
  const auto dims = header.at("output_dims").get<std::vector<int>>();
  if (dims.size() != 3) throw IoError("generator output_dims must have 3 entries");
  ToyGenerator gen(parse_generator_mode(header.at("mode").get<std::string>()),
                   Dims3{dims[0], dims[1], dims[2]}, 0);
  nn::load_values(gen.parameters(), ck.values);
  return gen;
}

namespace {

// Least-squares critic on an 8x-pooled volume.
class Critic {
 public:
  explicit Critic(Rng& rng) {
    net_.add(std::make_unique<nn::AvgPool>(nn::Triple{8, 8, 8}))
        .add(nn::Conv::conv3d(1, 8, 3, 1, 1, "critic.conv"))
        .add(std::make_unique<nn::ReLU>())
        .add(std::make_unique<nn::GlobalAvgMaxPool>())
        .add(std::make_unique<nn::Linear>(16, 1, "critic.fc"));
    nn::init_layers(net_, rng);
    net_.collect_parameters(params_);
  }

  float score(const nn::Tensor& volume) { return net_.forward(volume)[0]; }
  nn::Tensor backward(float grad) {
    return net_.backward(nn::Tensor(nn::Shape{1}, std::vector<float>{grad}));
  }
  std::vector<nn::Parameter*>& params() { return params_; }

 private:
  nn::Sequential net_;
  std::vector<nn::Parameter*> params_;
};

double voxel_mse(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

ToyGeneratorFit train_toy_generator(std::span<const TrainingPair> pairs,
                                    const ToyGeneratorConfig& config) {
  if (pairs.size() < kMinTrainingPairs) {
    throw InvalidArgument("toy generator needs at least " +
                          std::to_string(kMinTrainingPairs) + " pairs, got " +
                          std::to_string(pairs.size()));
  }
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0) ||
      config.consistency_weight < 0 || config.adversarial_weight < 0) {
    throw InvalidArgument("invalid generator training config");
  }
  const Dims3 dims = pairs[0].volume.dims();
  for (const auto& p : pairs) {
    if (p.volume.dims() != dims) {
      throw InvalidArgument("ground-truth volume " + p.patient_id + " has dims " +
                            to_string(p.volume.dims()) + ", expected " + to_string(dims));
    }
  }

  ToyGeneratorFit fit{ToyGenerator(config.mode, dims, config.seed), {}, 0.0, 0.0};
  ToyGenerator::Impl& m = fit.generator.impl();
  std::vector<ToyGenerator::Impl::Prepared> prepared;
  prepared.reserve(pairs.size());
  for (const auto& p : pairs) prepared.push_back(m.prepare(p.pa, &p.lateral));

  const auto mean_mse = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      s += voxel_mse(m.forward(prepared[i]), pairs[i].volume.voxels());
    }
    return s / static_cast<double>(pairs.size());
  };
  fit.initial_mse = mean_mse();

  nn::Adam opt(m.parameters(), {config.learning_rate});
  Rng critic_rng(derive_seed(config.seed, 0x637269));
  Critic critic(critic_rng);
  nn::Adam critic_opt(critic.params(), {config.learning_rate});
  const bool adversarial = config.adversarial_weight > 0;

  const int D = dims.depth, H = dims.height, W = dims.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double lambda = config.consistency_weight;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(config.seed, 0x73687566));
  std::vector<float> grad(dims.count());
  std::vector<double> drr(plane);
  std::vector<std::vector<float>> fakes;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 1; start < order.size();
         start += static_cast<std::size_t>(config.batch_size), ++batch) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      fakes.clear();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto& pred = m.forward(prepared[i]);
        const auto truth = pairs[i].volume.voxels();
        const double n = static_cast<double>(pred.size());
        double mse = 0.0;
        std::fill(drr.begin(), drr.end(), 0.0);
        for (std::size_t v = 0; v < pred.size(); ++v) {
          const double diff = static_cast<double>(pred[v]) - truth[v];
          mse += diff * diff;
          grad[v] = static_cast<float>(2.0 * diff / n * inv_b);
          drr[v % plane] += pred[v];
        }
        mse /= n;
        double cons = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
          drr[q] = drr[q] / D - prepared[i].pa_plane[q];
          cons += drr[q] * drr[q];
        }
        cons /= static_cast<double>(plane);
        const double cscale = lambda * 2.0 / (static_cast<double>(plane) * D) * inv_b;
        for (std::size_t v = 0; v < pred.size(); ++v) {
          grad[v] += static_cast<float>(cscale * drr[v % plane]);
        }
        double loss = mse + lambda * cons;
        if (adversarial) {
          // Generator term; the critic's own gradients are preserved around it.
          std::vector<std::vector<float>> saved;
          for (auto* p : critic.params()) saved.push_back(p->grad);
          const nn::Tensor fake(nn::Shape{1, D, H, W}, pred);
          const float s = critic.score(fake);
          loss += config.adversarial_weight * 0.5 * (s - 1.0) * (s - 1.0);
          const nn::Tensor gadv = critic.backward(
              static_cast<float>(config.adversarial_weight * (s - 1.0) * inv_b));
          for (std::size_t v = 0; v < grad.size(); ++v) grad[v] += gadv[v];
          for (std::size_t j = 0; j < saved.size(); ++j) critic.params()[j]->grad = saved[j];
          fakes.push_back(pred);
        }
        if (!std::isfinite(loss)) {
          throw TrainingError("non-finite generator loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch) + ", sample " +
                              pairs[i].patient_id);
        }
        epoch_loss += loss;
        m.backward(prepared[i], grad);
      }
      opt.step();
      if (adversarial) {
        critic_opt.zero_grad();
        for (std::size_t k = start; k < end; ++k) {
          const nn::Tensor real(nn::Shape{1, D, H, W},
                                std::vector<float>(pairs[order[k]].volume.voxels().begin(),
                                                   pairs[order[k]].volume.voxels().end()));
          const float sr = critic.score(real);
          critic.backward(static_cast<float>((sr - 1.0) * inv_b));
          const float sf = critic.score(nn::Tensor(nn::Shape{1, D, H, W}, fakes[k - start]));
          critic.backward(static_cast<float>(sf * inv_b));
        }
        critic_opt.step();
      }
      for (auto* p : m.parameters()) {
        if (!nn::all_finite(p->value)) {
          throw TrainingError("non-finite generator parameter " + p->name + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch));
        }
      }
    }
    fit.epoch_loss.push_back(epoch_loss / static_cast<double>(pairs.size()));
  }
  fit.final_mse = mean_mse();
  return fit;
}

double reconstruction_mse(const CTGenerator& gen, std::span<const TrainingPair> pairs) {
  if (pairs.empty()) throw InvalidArgument("no pairs to evaluate");
  double s = 0.0;
  for (const auto& p : pairs) {
    const Volume3D v = synthesize_ct(gen, p.pa, p.lateral, p.patient_id);
    if (v.dims() != p.volume.dims()) {
      throw InvalidArgument("generated and ground-truth dims differ for " + p.patient_id);
    }
    s += voxel_mse(v.voxels(), p.volume.voxels());
  }
  return s / static_cast<double>(pairs.size());
}

double projection_consistency(const Volume3D& volume, const ImagePlane2D& pa) {
  const ImagePlane2D drr = phantom::drr_project(volume, phantom::ProjectionAxis::depth);
  if (drr.width() != pa.width() || drr.height() != pa.height()) {
    throw InvalidArgument("projection is " + std::to_string(drr.width()) + "x" +
                          std::to_string(drr.height()) + " but the PA image is " +
                          std::to_string(pa.width()) + "x" + std::to_string(pa.height()));
  }
  const auto a = drr.pixels(), b = pa.pixels();
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) {
    warn("projection consistency of a constant image is defined as 0");
    return 0.0;
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

DiskGenerator::DiskGenerator(fs::path dir, GeneratorMode mode)
    : dir_(std::move(dir)), mode_(mode) {
  if (!fs::is_directory(dir_)) {
    throw IoError("volume directory " + dir_.string() + " does not exist");
  }
  std::vector<fs::path> vols;
  for (const auto& e : fs::directory_iterator(dir_)) {
    if (e.path().extension() == ".vol") vols.push_back(e.path());
  }
  if (!vols.empty()) {
    const fs::path first = *std::min_element(vols.begin(), vols.end());
    dims_ = io::read_volume(first).dims();
  }
}

Volume3D DiskGenerator::generate(const GeneratorInput& input) const {
  if (input.patient_id.empty()) {
    throw InvalidArgument("disk-backed generator needs a patient id");
  }
  const Volume3D v = io::read_volume(dir_ / (input.patient_id + ".vol"));
  std::vector<float> vox(v.voxels().begin(), v.voxels().end());
  for (float& x : vox) x = std::clamp(x, 0.0f, 1.0f);
  return {v.dims(), std::move(vox), provenance_for(mode_)};
}

std::unique_ptr<CTGenerator> load_generator(const fs::path& path,
                                            std::optional<GeneratorMode> mode) {
  if (fs::is_directory(path)) {
    if (!mode) {
      throw InvalidArgument("a volume directory generator needs an explicit mode");
    }
    return std::make_unique<DiskGenerator>(path, *mode);
  }
  if (!fs::exists(path)) throw IoError("generator " + path.string() + " not found");
  auto gen = std::make_unique<ToyGenerator>(ToyGenerator::load(path));
  if (mode && *mode != gen->mode()) {
    throw InvalidArgument("checkpoint " + path.string() + " holds a " +
                          std::string(to_string(gen->mode())) + " generator");
  }
  return gen;
}

}  // namespace tbx::synthesis
