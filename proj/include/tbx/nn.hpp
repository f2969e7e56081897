#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tbx/common.hpp"

namespace tbx::nn {

/// Channel x depth x height x width. 2D data uses depth 1, vectors use
/// channels only.
struct Shape {
  int c = 0, d = 1, h = 1, w = 1;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(c) * d * h * w;
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<float> data);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] std::span<float> data() { return data_; }
  [[nodiscard]] std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(int c, int d, int h, int w) { return data_[index(c, d, h, w)]; }
  [[nodiscard]] float at(int c, int d, int h, int w) const {
    return data_[index(c, d, h, w)];
  }

  /// Same data, different shape of equal size.
  [[nodiscard]] Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[nodiscard]] std::size_t index(int c, int d, int h, int w) const {
    return ((static_cast<std::size_t>(c) * shape_.d + d) * shape_.h + h) *
               shape_.w + w;
  }

  Shape shape_{};
  std::vector<float> data_;
};

struct Parameter {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  explicit Parameter(std::string n = {}, std::size_t count = 0)
      : name(std::move(n)), value(count, 0.0f), grad(count, 0.0f) {}
};

/// Layers cache what backward() needs during forward(); a forward/backward
/// pair must not be interleaved with another sample's forward.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& input) = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor backward(const Tensor& grad_output) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
};

struct Triple {
  int d = 1, h = 1, w = 1;
};

/// 3D convolution over a C x D x H x W tensor; 2D convolution is the
/// depth-1 kernel case.
class Conv : public Layer {
 public:
  Conv(int in_channels, int out_channels, Triple kernel, Triple stride,
       Triple padding, std::string name = "conv");

  static std::unique_ptr<Conv> conv2d(int in, int out, int k, int stride, int pad,
                                      std::string name = "conv2d");
  static std::unique_ptr<Conv> conv3d(int in, int out, int k, int stride, int pad,
                                      std::string name = "conv3d");

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  [[nodiscard]] Shape output_shape(const Shape& in) const;
  void init(Rng& rng);

 private:
  int in_c_, out_c_;
  Triple k_, s_, p_;
  Parameter weight_, bias_;
  Tensor input_;
};

class Linear : public Layer {
 public:
  Linear(int in_features, int out_features, std::string name = "linear");

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void init(Rng& rng);

 private:
  int in_, out_;
  Parameter weight_, bias_;
  Tensor input_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  Tensor output_;
};

/// Non-overlapping average pooling; trailing cells that do not fill a
/// window are dropped.
class AvgPool : public Layer {
 public:
  explicit AvgPool(Triple window) : k_(window) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  Triple k_;
  Shape in_shape_;
};

/// Per-channel global average and global max, concatenated: C -> 2C.
class GlobalAvgMaxPool : public Layer {
 public:
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  Sequential& add(std::unique_ptr<Layer> layer);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  [[nodiscard]] std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Kaiming-uniform initialization for every conv/linear in `seq`.
void init_layers(Sequential& seq, Rng& rng);

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive moment estimation with bias correction.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options);

  void zero_grad();
  void step();
  [[nodiscard]] long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

std::size_t parameter_count(std::span<Parameter* const> params);
std::vector<float> flatten_values(std::span<Parameter* const> params);
void load_values(std::span<Parameter* const> params, std::span<const float> values);
std::uint64_t checksum(std::span<Parameter* const> params);
bool all_finite(std::span<const float> values);

}  // namespace tbx::nn
