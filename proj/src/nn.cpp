#include "tbx/nn.hpp"

#include <algorithm>
#include <cmath>

namespace tbx::nn {

std::string to_string(const Shape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.d) + "x" +
         std::to_string(s.h) + "x" + std::to_string(s.w);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw InvalidArgument("tensor data size does not match shape " +
                          to_string(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.size() != data_.size()) {
    throw InvalidArgument("cannot reshape " + to_string(shape_) + " to " +
                          to_string(shape));
  }
  return Tensor(shape, data_);
}

namespace {

int out_extent(int n, int k, int s, int p) { return (n + 2 * p - k) / s + 1; }

// Output indices o with 0 <= o*s + k_off - p < n, clipped to [0, out).
struct Range {
  int lo, hi;  // inclusive lo, exclusive hi
};

Range valid_range(int n, int out, int k_off, int s, int p) {
  const int shift = p - k_off;  // need o*s >= shift and o*s <= n-1+shift
  const int lo = shift <= 0 ? 0 : (shift + s - 1) / s;
  const int top = n - 1 + shift;
  if (top < 0) return {0, 0};
  const int hi = std::min(out, top / s + 1);
  return {lo, std::max(lo, hi)};
}

}  // namespace

Conv::Conv(int in_channels, int out_channels, Triple kernel, Triple stride,
           Triple padding, std::string name)
    : in_c_(in_channels),
      out_c_(out_channels),
      k_(kernel),
      s_(stride),
      p_(padding),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels *
                                    kernel.d * kernel.h * kernel.w),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {}

std::unique_ptr<Conv> Conv::conv2d(int in, int out, int k, int stride, int pad,
                                   std::string name) {
  return std::make_unique<Conv>(in, out, Triple{1, k, k}, Triple{1, stride, stride},
                                Triple{0, pad, pad}, std::move(name));
}

std::unique_ptr<Conv> Conv::conv3d(int in, int out, int k, int stride, int pad,
                                   std::string name) {
  return std::make_unique<Conv>(in, out, Triple{k, k, k},
                                Triple{stride, stride, stride},
                                Triple{pad, pad, pad}, std::move(name));
}

Shape Conv::output_shape(const Shape& in) const {
  return {out_c_, out_extent(in.d, k_.d, s_.d, p_.d),
          out_extent(in.h, k_.h, s_.h, p_.h), out_extent(in.w, k_.w, s_.w, p_.w)};
}

void Conv::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_c_) * k_.d * k_.h * k_.w;
  const auto bound = static_cast<float>(std::sqrt(6.0 / fan_in));
  std::uniform_real_distribution<float> u(-bound, bound);
  for (float& w : weight_.value) w = u(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
}

Tensor Conv::forward(const Tensor& input) {
  const Shape in = input.shape();
  if (in.c != in_c_) {
    throw InvalidArgument("conv expects " + std::to_string(in_c_) +
                          " input channels, got " + std::to_string(in.c));
  }
  const Shape os = output_shape(in);
  if (os.d <= 0 || os.h <= 0 || os.w <= 0) {
    throw InvalidArgument("conv input too small: " + to_string(in));
  }
  input_ = input;
  Tensor out(os);
  const float* x = input.data().data();
  float* y = out.data().data();
  const std::size_t out_plane = static_cast<std::size_t>(os.d) * os.h * os.w;

  for (int oc = 0; oc < out_c_; ++oc) {
    float* yc = y + oc * out_plane;
    std::fill(yc, yc + out_plane, bias_.value[oc]);
    for (int ic = 0; ic < in_c_; ++ic) {
      const float* xc = x + static_cast<std::size_t>(ic) * in.d * in.h * in.w;
      for (int kz = 0; kz < k_.d; ++kz) {
        const Range rz = valid_range(in.d, os.d, kz, s_.d, p_.d);
        for (int ky = 0; ky < k_.h; ++ky) {
          const Range ry = valid_range(in.h, os.h, ky, s_.h, p_.h);
          for (int kx = 0; kx < k_.w; ++kx) {
            const Range rx = valid_range(in.w, os.w, kx, s_.w, p_.w);
            const float wv =
                weight_.value[(((static_cast<std::size_t>(oc) * in_c_ + ic) * k_.d + kz) *
                                   k_.h + ky) * k_.w + kx];
            for (int oz = rz.lo; oz < rz.hi; ++oz) {
              const int iz = oz * s_.d + kz - p_.d;
              for (int oy = ry.lo; oy < ry.hi; ++oy) {
                const int iy = oy * s_.h + ky - p_.h;
                const float* xr = xc + (static_cast<std::size_t>(iz) * in.h + iy) * in.w;
                float* yr = yc + (static_cast<std::size_t>(oz) * os.h + oy) * os.w;
                const int xoff = kx - p_.w;
                if (s_.w == 1) {
                  for (int ox = rx.lo; ox < rx.hi; ++ox) yr[ox] += wv * xr[ox + xoff];
                } else {
                  for (int ox = rx.lo; ox < rx.hi; ++ox) {
                    yr[ox] += wv * xr[ox * s_.w + xoff];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor Conv::backward(const Tensor& grad_output) {
  const Shape in = input_.shape();
  const Shape os = grad_output.shape();
  Tensor grad_in(in);
  const float* x = input_.data().data();
  const float* g = grad_output.data().data();
  float* gx = grad_in.data().data();
  const std::size_t out_plane = static_cast<std::size_t>(os.d) * os.h * os.w;

  for (int oc = 0; oc < out_c_; ++oc) {
    const float* gc = g + oc * out_plane;
    double bsum = 0.0;
    for (std::size_t i = 0; i < out_plane; ++i) bsum += gc[i];
    bias_.grad[oc] += static_cast<float>(bsum);
    for (int ic = 0; ic < in_c_; ++ic) {
      const std::size_t in_off = static_cast<std::size_t>(ic) * in.d * in.h * in.w;
      const float* xc = x + in_off;
      float* gxc = gx + in_off;
      for (int kz = 0; kz < k_.d; ++kz) {
        const Range rz = valid_range(in.d, os.d, kz, s_.d, p_.d);
        for (int ky = 0; ky < k_.h; ++ky) {
          const Range ry = valid_range(in.h, os.h, ky, s_.h, p_.h);
          for (int kx = 0; kx < k_.w; ++kx) {
            const Range rx = valid_range(in.w, os.w, kx, s_.w, p_.w);
            const std::size_t widx =
                (((static_cast<std::size_t>(oc) * in_c_ + ic) * k_.d + kz) * k_.h + ky) *
                    k_.w + kx;
            const float wv = weight_.value[widx];
            float wgrad = 0.0f;
            for (int oz = rz.lo; oz < rz.hi; ++oz) {
              const int iz = oz * s_.d + kz - p_.d;
              for (int oy = ry.lo; oy < ry.hi; ++oy) {
                const int iy = oy * s_.h + ky - p_.h;
                const std::size_t row = (static_cast<std::size_t>(iz) * in.h + iy) * in.w;
                const float* xr = xc + row;
                float* gxr = gxc + row;
                const float* gr = gc + (static_cast<std::size_t>(oz) * os.h + oy) * os.w;
                const int xoff = kx - p_.w;
                if (s_.w == 1) {
                  for (int ox = rx.lo; ox < rx.hi; ++ox) {
                    wgrad += xr[ox + xoff] * gr[ox];
                    gxr[ox + xoff] += wv * gr[ox];
                  }
                } else {
                  for (int ox = rx.lo; ox < rx.hi; ++ox) {
                    wgrad += xr[ox * s_.w + xoff] * gr[ox];
                    gxr[ox * s_.w + xoff] += wv * gr[ox];
                  }
                }
              }
            }
            weight_.grad[widx] += wgrad;
          }
        }
      }
    }
  }
  return grad_in;
}

void Conv::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Linear::Linear(int in_features, int out_features, std::string name)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", static_cast<std::size_t>(in_features) * out_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features)) {}

void Linear::init(Rng& rng) {
  const auto bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(in_)));
  std::uniform_real_distribution<float> u(-bound, bound);
  for (float& w : weight_.value) w = u(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
}

Tensor Linear::forward(const Tensor& input) {
  if (input.size() != static_cast<std::size_t>(in_)) {
    throw InvalidArgument("linear expects " + std::to_string(in_) +
                          " features, got " + std::to_string(input.size()));
  }
  input_ = input;
  Tensor out(Shape{out_});
  const float* x = input.data().data();
  for (int o = 0; o < out_; ++o) {
    const float* wr = weight_.value.data() + static_cast<std::size_t>(o) * in_;
    float acc = bias_.value[o];
    for (int i = 0; i < in_; ++i) acc += wr[i] * x[i];
    out[o] = acc;
  }
  return out;
}

Tensor Linear::backward(const Tensor& grad_output) {
  Tensor grad_in(input_.shape());
  const float* x = input_.data().data();
  for (int o = 0; o < out_; ++o) {
    const float g = grad_output[o];
    if (g == 0.0f) continue;
    bias_.grad[o] += g;
    const float* wr = weight_.value.data() + static_cast<std::size_t>(o) * in_;
    float* gwr = weight_.grad.data() + static_cast<std::size_t>(o) * in_;
    for (int i = 0; i < in_; ++i) {
      gwr[i] += g * x[i];
      grad_in[i] += g * wr[i];
    }
  }
  return grad_in;
}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Tensor ReLU::forward(const Tensor& input) {
  output_ = input;
  for (float& v : output_.data()) v = v > 0.0f ? v : 0.0f;
  return output_;
}

Tensor ReLU::backward(const Tensor& grad_output) {
  Tensor g = grad_output;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output_[i] > 0.0f)) g[i] = 0.0f;
  }
  return g;
}

Tensor AvgPool::forward(const Tensor& input) {
  in_shape_ = input.shape();
  const Shape os{in_shape_.c, in_shape_.d / k_.d, in_shape_.h / k_.h,
                 in_shape_.w / k_.w};
  if (os.d == 0 || os.h == 0 || os.w == 0) {
    throw InvalidArgument("pool window larger than input " + to_string(in_shape_));
  }
  Tensor out(os);
  const float scale = 1.0f / static_cast<float>(k_.d * k_.h * k_.w);
  for (int c = 0; c < os.c; ++c)
    for (int z = 0; z < os.d; ++z)
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x) {
          float acc = 0.0f;
          for (int a = 0; a < k_.d; ++a)
            for (int b = 0; b < k_.h; ++b)
              for (int e = 0; e < k_.w; ++e)
                acc += input.at(c, z * k_.d + a, y * k_.h + b, x * k_.w + e);
          out.at(c, z, y, x) = acc * scale;
        }
  return out;
}

Tensor AvgPool::backward(const Tensor& grad_output) {
  Tensor g(in_shape_);
  const Shape os = grad_output.shape();
  const float scale = 1.0f / static_cast<float>(k_.d * k_.h * k_.w);
  for (int c = 0; c < os.c; ++c)
    for (int z = 0; z < os.d; ++z)
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x) {
          const float v = grad_output.at(c, z, y, x) * scale;
          for (int a = 0; a < k_.d; ++a)
            for (int b = 0; b < k_.h; ++b)
              for (int e = 0; e < k_.w; ++e)
                g.at(c, z * k_.d + a, y * k_.h + b, x * k_.w + e) = v;
        }
  return g;
}

Tensor GlobalAvgMaxPool::forward(const Tensor& input) {
  in_shape_ = input.shape();
  const std::size_t plane = static_cast<std::size_t>(in_shape_.d) * in_shape_.h *
                            in_shape_.w;
  Tensor out(Shape{2 * in_shape_.c});
  argmax_.assign(static_cast<std::size_t>(in_shape_.c), 0);
  for (int c = 0; c < in_shape_.c; ++c) {
    const float* p = input.data().data() + c * plane;
    double sum = 0.0;
    std::size_t best = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      sum += p[i];
      if (p[i] > p[best]) best = i;
    }
    out[c] = static_cast<float>(sum / static_cast<double>(plane));
    out[in_shape_.c + c] = p[best];
    argmax_[c] = best;
  }
  return out;
}

Tensor GlobalAvgMaxPool::backward(const Tensor& grad_output) {
  Tensor g(in_shape_);
  const std::size_t plane = static_cast<std::size_t>(in_shape_.d) * in_shape_.h *
                            in_shape_.w;
  for (int c = 0; c < in_shape_.c; ++c) {
    float* p = g.data().data() + c * plane;
    const float avg = grad_output[c] / static_cast<float>(plane);
    std::fill(p, p + plane, avg);
    p[argmax_[c]] += grad_output[in_shape_.c + c];
  }
  return g;
}

Sequential& Sequential::add(std::unique_ptr<Layer> layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& input) {
  Tensor x = input;
  for (auto& layer : layers_) x = layer->forward(x);
  return x;
}

Tensor Sequential::backward(const Tensor& grad_output) {
  Tensor g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void init_layers(Sequential& seq, Rng& rng) {
  for (auto& layer : seq.layers()) {
    if (auto* conv = dynamic_cast<Conv*>(layer.get())) {
      conv->init(rng);
    } else if (auto* linear = dynamic_cast<Linear*>(layer.get())) {
      linear->init(rng);
    } else if (auto* inner = dynamic_cast<Sequential*>(layer.get())) {
      init_layers(*inner, rng);
    }
  }
}

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), opt_(options) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= static_cast<float>(opt_.learning_rate * mhat /
                                       (std::sqrt(vhat) + opt_.epsilon));
    }
  }
}

std::size_t parameter_count(std::span<Parameter* const> params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

std::vector<float> flatten_values(std::span<Parameter* const> params) {
  std::vector<float> out;
  out.reserve(parameter_count(params));
  for (const auto* p : params) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void load_values(std::span<Parameter* const> params, std::span<const float> values) {
  if (values.size() != parameter_count(params)) {
    throw InvalidArgument("parameter blob has " + std::to_string(values.size()) +
                          " values, model expects " +
                          std::to_string(parameter_count(params)));
  }
  std::size_t off = 0;
  for (auto* p : params) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), p->value.size(),
                p->value.begin());
    off += p->value.size();
  }
}

std::uint64_t checksum(std::span<Parameter* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params) h = fnv1a64_of<float>(p->value, h);
  return h;
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(),
                     [](float v) { return std::isfinite(v); });
}

}  // namespace tbx::nn
