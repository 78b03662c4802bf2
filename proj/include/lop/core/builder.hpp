#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lop/core/network.hpp"

namespace lop {

/// Builds a Network module by module with PyTorch-style default
/// initialization: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// normalization affine (1, 0), prelu slope 0.25.
/// Every method wires to the previous slot unless `from` is given and
/// returns the slot it produced.
class NetworkBuilder {
 public:
  NetworkBuilder(Shape input, std::uint64_t seed) : net_(input), rng_(seed) {}

  int last() const { return net_.output_slot(); }

  int linear(int out, int from = -1) {
    Module m = make(ModuleKind::Linear, from);
    m.out_shape = Shape{out, 1, 1};
    const int fan_in = m.in_shape.size();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    m.params = {uniform_matrix(rng_, out, fan_in, -bound, bound), uniform_matrix(rng_, out, 1, -bound, bound)};
    return net_.add(std::move(m));
  }

  int conv2d(int out_channels, int kernel, int stride = 1, int padding = 0, int from = -1) {
    Module m = make(ModuleKind::Conv2d, from);
    m.kernel = kernel;
    m.stride = stride;
    m.padding = padding;
    const Shape in = m.in_shape;
    m.out_shape = Shape{out_channels, (in.height + 2 * padding - kernel) / stride + 1,
                        (in.width + 2 * padding - kernel) / stride + 1};
    const int fan_in = in.channels * kernel * kernel;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    m.params = {uniform_matrix(rng_, out_channels, fan_in, -bound, bound),
                uniform_matrix(rng_, out_channels, 1, -bound, bound)};
    return net_.add(std::move(m));
  }

  int batchnorm(int from = -1, double momentum = 0.1, double eps = 1e-5) {
    Module m = make(ModuleKind::BatchNorm, from);
    const int c = m.in_shape.channels;
    m.momentum = momentum;
    m.eps = eps;
    m.params = {Matrix::Ones(c, 1), Matrix::Zero(c, 1)};
    m.buffers = {Matrix::Zero(c, 1), Matrix::Ones(c, 1)};
    return net_.add(std::move(m));
  }

  int layernorm(int from = -1, double eps = 1e-5) {
    Module m = make(ModuleKind::LayerNorm, from);
    const int f = m.in_shape.size();
    m.eps = eps;
    m.params = {Matrix::Ones(f, 1), Matrix::Zero(f, 1)};
    return net_.add(std::move(m));
  }

  int activation(ActivationFn fn, double gain = 1.0, double shift = 0.0, int from = -1, double prelu_slope = 0.25) {
    Module m = make(ModuleKind::Activation, from);
    m.fn = fn;
    m.gain = gain;
    m.shift = shift;
    if (fn == ActivationFn::Prelu) m.params = {Matrix::Constant(m.in_shape.size(), 1, prelu_slope)};
    return net_.add(std::move(m));
  }

  int dropout(double p, int from = -1) {
    Module m = make(ModuleKind::Dropout, from);
    m.dropout_p = p;
    return net_.add(std::move(m));
  }

  int residual_add(int a, int b) {
    Module m;
    m.kind = ModuleKind::ResidualAdd;
    m.inputs = {a, b};
    return net_.add(std::move(m));
  }

  int flatten(int from = -1) { return net_.add(make(ModuleKind::Flatten, from)); }

  int softmax(int from = -1) { return net_.add(make(ModuleKind::SoftmaxOutput, from)); }

  Network& network() { return net_; }
  Network build() && { return std::move(net_); }
  Network build() const& { return net_; }

 private:
  Module make(ModuleKind kind, int from) {
    Module m;
    m.kind = kind;
    m.inputs = {from < 0 ? last() : from};
    m.in_shape = net_.slot_shape(m.inputs[0]);
    return m;
  }

  Network net_;
  Rng rng_;
};

/// Dense MLP: input -> [linear -> activation] x hidden -> linear.
inline Network make_mlp(int input, const std::vector<int>& hidden, int output, ActivationFn fn, std::uint64_t seed) {
  NetworkBuilder b(Shape{input, 1, 1}, seed);
  for (int h : hidden) {
    b.linear(h);
    b.activation(fn);
  }
  b.linear(output);
  return std::move(b).build();
}

}  // namespace lop
