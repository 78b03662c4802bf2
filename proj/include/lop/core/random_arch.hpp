#pragma once

#include <cstdint>
#include <string>

#include "lop/core/builder.hpp"
#include "lop/core/common.hpp"

namespace lop {

struct RandomProblem {
  Network net;
  Matrix x;
  Matrix y;
  LossKind loss = LossKind::Mse;
  Mode mode = Mode::Eval;
  std::string description;
};

inline ActivationFn random_activation(Rng& rng) {
  static const ActivationFn fns[] = {ActivationFn::Relu, ActivationFn::Tanh, ActivationFn::Gelu,
                                     ActivationFn::Identity, ActivationFn::Prelu};
  return fns[std::uniform_int_distribution<int>(0, 4)(rng)];
}

/// Random small network drawing from every supported module kind, with a
/// batch and a target to match. Odd seeds take a conv trunk, even seeds a
/// dense one; the remaining choices are random.
inline RandomProblem random_problem(std::uint64_t seed) {
  Rng rng(seed);
  auto coin = [&](double p) { return std::bernoulli_distribution(p)(rng); };
  RandomProblem p;
  const bool conv = seed % 2 == 1;
  const int batch = 5;
  Shape input = conv ? Shape{2, 4, 4} : Shape{6, 1, 1};
  NetworkBuilder b(input, derive_seed(seed, 1));
  std::string d;
  auto norm = [&] {
    const int r = std::uniform_int_distribution<int>(0, 2)(rng);
    if (r == 1) {
      b.batchnorm();
      d += "bn ";
    } else if (r == 2) {
      b.layernorm();
      d += "ln ";
    }
  };
  auto act = [&] {
    const ActivationFn fn = random_activation(rng);
    b.activation(fn, uniform(rng, 0.5, 1.5), uniform(rng, -0.2, 0.2));
    d += to_string(fn) + " ";
  };
  if (conv) {
    b.conv2d(3, 3, 1, 1);
    d += "conv ";
    norm();
    act();
    if (coin(0.5)) {
      const int skip = b.last();
      b.conv2d(3, 3, 1, 1);
      act();
      b.residual_add(skip, b.last());
      d += "residual ";
    }
    b.flatten();
    d += "flatten ";
  }
  b.linear(7);
  d += "linear ";
  norm();
  act();
  if (coin(0.5)) {
    const int skip = b.last();
    b.linear(7);
    act();
    b.residual_add(skip, b.last());
    d += "residual ";
  }
  if (coin(0.5)) {
    b.dropout(0.3);
    d += "dropout ";
  }
  const int outputs = 3;
  b.linear(outputs);
  d += "linear";
  p.loss = LossKind::Mse;
  if (coin(0.5)) {
    b.softmax();
    p.loss = LossKind::CrossEntropy;
    d += " softmax";
  }
  p.net = std::move(b).build();
  for (auto& m : p.net.modules()) {
    if (m.kind == ModuleKind::BatchNorm) {
      for (Eigen::Index c = 0; c < m.params[0].rows(); ++c) {
        m.params[0](c, 0) = uniform(rng, 0.5, 1.5);
        m.params[1](c, 0) = uniform(rng, -0.3, 0.3);
        m.buffers[0](c, 0) = uniform(rng, -0.2, 0.2);
        m.buffers[1](c, 0) = uniform(rng, 0.5, 1.5);
      }
    }
    if (m.kind == ModuleKind::LayerNorm) {
      for (Eigen::Index c = 0; c < m.params[0].rows(); ++c) {
        m.params[0](c, 0) = uniform(rng, 0.5, 1.5);
        m.params[1](c, 0) = uniform(rng, -0.3, 0.3);
      }
    }
  }
  p.mode = coin(0.5) ? Mode::Train : Mode::Eval;
  p.x = gaussian_matrix(rng, batch, input.size());
  if (p.loss == LossKind::Mse) {
    p.y = gaussian_matrix(rng, batch, outputs);
  } else {
    p.y = Matrix::Zero(batch, outputs);
    for (int s = 0; s < batch; ++s) p.y(s, std::uniform_int_distribution<int>(0, outputs - 1)(rng)) = 1.0;
  }
  p.description = d + (p.mode == Mode::Train ? " [train]" : " [eval]");
  return p;
}

/// Network using every module kind once: conv, batchnorm, prelu, conv,
/// layernorm, tanh, residual-add, dropout, flatten, linear, gelu, linear,
/// softmax-output.
inline Network all_kinds_network(std::uint64_t seed, double dropout = 0.3) {
  NetworkBuilder b(Shape{2, 4, 4}, seed);
  b.conv2d(3, 3, 1, 1);
  b.batchnorm();
  const int a = b.activation(ActivationFn::Prelu);
  b.conv2d(3, 3, 1, 1);
  b.layernorm();
  const int t = b.activation(ActivationFn::Tanh, 1.2, 0.1);
  b.residual_add(a, t);
  b.dropout(dropout);
  b.flatten();
  b.linear(6);
  b.activation(ActivationFn::Gelu);
  b.linear(3);
  b.softmax();
  Network net = std::move(b).build();
  // Non-trivial affine and running statistics so duplication errors show.
  Rng rng(derive_seed(seed, 7));
  for (auto& m : net.modules()) {
    if (m.kind == ModuleKind::BatchNorm || m.kind == ModuleKind::LayerNorm) {
      m.params[0] = uniform_matrix(rng, m.params[0].rows(), 1, 0.5, 1.5);
      m.params[1] = uniform_matrix(rng, m.params[1].rows(), 1, -0.3, 0.3);
    }
    if (m.kind == ModuleKind::BatchNorm) {
      m.buffers[0] = uniform_matrix(rng, m.buffers[0].rows(), 1, -0.2, 0.2);
      m.buffers[1] = uniform_matrix(rng, m.buffers[1].rows(), 1, 0.5, 1.5);
    }
    if (m.kind == ModuleKind::Activation && m.fn == ActivationFn::Prelu)
      m.params[0] = uniform_matrix(rng, m.params[0].rows(), 1, 0.05, 0.5);
  }
  return net;
}

}  // namespace lop
