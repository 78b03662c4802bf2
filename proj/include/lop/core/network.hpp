#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lop/core/activation.hpp"
#include "lop/core/common.hpp"

namespace lop {

enum class ModuleKind {
  Linear,
  Conv2d,
  BatchNorm,
  LayerNorm,
  Activation,
  Dropout,
  ResidualAdd,
  Flatten,
  SoftmaxOutput
};

inline std::string to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::Linear: return "linear";
    case ModuleKind::Conv2d: return "conv2d";
    case ModuleKind::BatchNorm: return "batchnorm";
    case ModuleKind::LayerNorm: return "layernorm";
    case ModuleKind::Activation: return "activation";
    case ModuleKind::Dropout: return "dropout";
    case ModuleKind::ResidualAdd: return "residual_add";
    case ModuleKind::Flatten: return "flatten";
    case ModuleKind::SoftmaxOutput: return "softmax_output";
  }
  return "?";
}

inline ModuleKind module_kind_from_string(const std::string& s) {
  for (auto k : {ModuleKind::Linear, ModuleKind::Conv2d, ModuleKind::BatchNorm, ModuleKind::LayerNorm,
                 ModuleKind::Activation, ModuleKind::Dropout, ModuleKind::ResidualAdd, ModuleKind::Flatten,
                 ModuleKind::SoftmaxOutput}) {
    if (to_string(k) == s) return k;
  }
  if (s == "residual-add") return ModuleKind::ResidualAdd;
  if (s == "softmax-output" || s == "softmax") return ModuleKind::SoftmaxOutput;
  throw ValidationError("unsupported module kind '" + s + "'");
}

/// Channel-major feature layout of one interface: feature index is
/// (c * height + y) * width + x. Dense layers use height = width = 1.
struct Shape {
  int channels = 0;
  int height = 1;
  int width = 1;

  int spatial() const { return height * width; }
  int size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
};

/// One typed module of the network DAG. Parameters are stored as matrices:
/// weights are out x in (conv: out_channels x in_channels*k*k); every
/// per-unit vector (bias, gamma, beta, prelu slope) is n x 1.
template <typename T>
struct BasicModule {
  ModuleKind kind = ModuleKind::Linear;
  std::string name;
  std::vector<int> inputs;  // slot ids; slot 0 is the network input
  Shape in_shape;
  Shape out_shape;

  int kernel = 1;
  int stride = 1;
  int padding = 0;

  ActivationFn fn = ActivationFn::Relu;
  double gain = 1.0;
  double shift = 0.0;

  double dropout_p = 0.0;

  double eps = 1e-5;
  double momentum = 0.1;

  std::vector<int> permutation;  // flatten: output q reads input permutation[q]

  std::vector<MatrixT<T>> params;
  std::vector<MatrixT<T>> buffers;  // batchnorm running mean / var

  template <typename U>
  BasicModule<U> cast() const {
    BasicModule<U> m;
    m.kind = kind;
    m.name = name;
    m.inputs = inputs;
    m.in_shape = in_shape;
    m.out_shape = out_shape;
    m.kernel = kernel;
    m.stride = stride;
    m.padding = padding;
    m.fn = fn;
    m.gain = gain;
    m.shift = shift;
    m.dropout_p = dropout_p;
    m.eps = eps;
    m.momentum = momentum;
    m.permutation = permutation;
    for (const auto& p : params) m.params.push_back(p.template cast<U>());
    for (const auto& b : buffers) m.buffers.push_back(b.template cast<U>());
    return m;
  }
};

using Module = BasicModule<double>;

inline std::vector<std::string> parameter_names(ModuleKind kind, ActivationFn fn = ActivationFn::Relu) {
  switch (kind) {
    case ModuleKind::Linear:
    case ModuleKind::Conv2d: return {"weight", "bias"};
    case ModuleKind::BatchNorm:
    case ModuleKind::LayerNorm: return {"gamma", "beta"};
    case ModuleKind::Activation:
      if (fn == ActivationFn::Prelu) return {"slope"};
      return {};
    default: return {};
  }
}

inline bool is_parameter_free(ModuleKind kind) {
  return kind == ModuleKind::Dropout || kind == ModuleKind::ResidualAdd || kind == ModuleKind::Flatten ||
         kind == ModuleKind::SoftmaxOutput;
}

/// Feed-forward DAG of modules. Module i writes slot i + 1 and may read any
/// earlier slot, so module order is a fixed topological order.
template <typename T>
class BasicNetwork {
 public:
  BasicNetwork() = default;
  explicit BasicNetwork(Shape input) : input_shape_(input) {
    if (input.size() <= 0) throw ValidationError("input shape must be non-empty");
  }

  const Shape& input_shape() const { return input_shape_; }
  int num_slots() const { return static_cast<int>(modules_.size()) + 1; }
  int output_slot() const { return static_cast<int>(modules_.size()); }
  const Shape& slot_shape(int slot) const {
    return slot == 0 ? input_shape_ : modules_.at(static_cast<std::size_t>(slot - 1)).out_shape;
  }

  std::vector<BasicModule<T>>& modules() { return modules_; }
  const std::vector<BasicModule<T>>& modules() const { return modules_; }
  BasicModule<T>& module(int i) { return modules_.at(static_cast<std::size_t>(i)); }
  const BasicModule<T>& module(int i) const { return modules_.at(static_cast<std::size_t>(i)); }

  /// Appends a module after checking wiring, shapes and parameter shapes.
  int add(BasicModule<T> m) {
    if (m.name.empty()) m.name = to_string(m.kind) + std::to_string(modules_.size());
    const int out_slot = num_slots();
    const std::size_t want_inputs = m.kind == ModuleKind::ResidualAdd ? 2 : 1;
    if (m.inputs.size() != want_inputs) {
      throw ValidationError("expected " + std::to_string(want_inputs) + " input slot(s)", m.name);
    }
    for (int s : m.inputs) {
      if (s < 0 || s >= out_slot) throw ValidationError("input slot " + std::to_string(s) + " does not precede", m.name);
    }
    const Shape& in = slot_shape(m.inputs[0]);
    if (m.in_shape.size() == 0) m.in_shape = in;
    if (!(m.in_shape == in)) throw ValidationError("declared input shape does not match wiring", m.name);
    if (m.kind == ModuleKind::ResidualAdd && !(slot_shape(m.inputs[1]) == in)) {
      throw ValidationError("residual branches have different shapes", m.name);
    }
    validate_module(m);
    modules_.push_back(std::move(m));
    return out_slot;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& m : modules_)
      for (const auto& p : m.params) n += static_cast<std::size_t>(p.size());
    return n;
  }

  std::string parameter_name(std::size_t module, std::size_t param) const {
    const auto& m = modules_.at(module);
    return m.name + "." + parameter_names(m.kind, m.fn).at(param);
  }

  std::vector<T> flat_parameters() const {
    std::vector<T> out;
    out.reserve(num_parameters());
    for (const auto& m : modules_)
      for (const auto& p : m.params) out.insert(out.end(), p.data(), p.data() + p.size());
    return out;
  }

  void set_flat_parameters(std::span<const T> flat) {
    if (flat.size() != num_parameters()) throw Error("flat parameter vector has wrong length");
    std::size_t k = 0;
    for (auto& m : modules_)
      for (auto& p : m.params)
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = flat[k++];
  }

  template <typename U>
  BasicNetwork<U> cast() const {
    BasicNetwork<U> out(input_shape_);
    for (const auto& m : modules_) out.modules().push_back(m.template cast<U>());
    return out;
  }

 private:
  static void expect_shape(const BasicModule<T>& m, std::size_t idx, Eigen::Index rows, Eigen::Index cols,
                           const std::vector<MatrixT<T>>& v, const char* what) {
    if (v.size() <= idx || v[idx].rows() != rows || v[idx].cols() != cols) {
      throw ValidationError(std::string(what) + " " + std::to_string(idx) + " must be " + std::to_string(rows) + "x" +
                                std::to_string(cols),
                            m.name);
    }
  }

  static void validate_module(BasicModule<T>& m) {
    const Shape in = m.in_shape;
    auto params = [&](std::size_t n) {
      if (m.params.size() != n) throw ValidationError("expected " + std::to_string(n) + " parameter tensors", m.name);
    };
    switch (m.kind) {
      case ModuleKind::Linear:
        if (m.out_shape.height != 1 || m.out_shape.width != 1 || m.out_shape.channels <= 0) {
          throw ValidationError("linear output must be a positive dense width", m.name);
        }
        params(2);
        expect_shape(m, 0, m.out_shape.channels, in.size(), m.params, "parameter");
        expect_shape(m, 1, m.out_shape.channels, 1, m.params, "parameter");
        break;
      case ModuleKind::Conv2d: {
        if (m.kernel <= 0 || m.stride <= 0 || m.padding < 0) throw ValidationError("bad conv geometry", m.name);
        const int oh = (in.height + 2 * m.padding - m.kernel) / m.stride + 1;
        const int ow = (in.width + 2 * m.padding - m.kernel) / m.stride + 1;
        if (oh <= 0 || ow <= 0) throw ValidationError("kernel larger than padded input", m.name);
        if (m.out_shape.height != oh || m.out_shape.width != ow) {
          throw ValidationError("declared conv output shape does not match geometry", m.name);
        }
        params(2);
        expect_shape(m, 0, m.out_shape.channels, in.channels * m.kernel * m.kernel, m.params, "parameter");
        expect_shape(m, 1, m.out_shape.channels, 1, m.params, "parameter");
        break;
      }
      case ModuleKind::BatchNorm:
        m.out_shape = in;
        params(2);
        expect_shape(m, 0, in.channels, 1, m.params, "parameter");
        expect_shape(m, 1, in.channels, 1, m.params, "parameter");
        if (m.buffers.size() != 2) throw ValidationError("batchnorm needs running mean and variance", m.name);
        expect_shape(m, 0, in.channels, 1, m.buffers, "buffer");
        expect_shape(m, 1, in.channels, 1, m.buffers, "buffer");
        break;
      case ModuleKind::LayerNorm:
        m.out_shape = in;
        params(2);
        expect_shape(m, 0, in.size(), 1, m.params, "parameter");
        expect_shape(m, 1, in.size(), 1, m.params, "parameter");
        break;
      case ModuleKind::Activation:
        m.out_shape = in;
        if (m.fn == ActivationFn::Prelu) {
          params(1);
          expect_shape(m, 0, in.size(), 1, m.params, "parameter");
        } else {
          params(0);
        }
        break;
      case ModuleKind::Dropout:
        if (!(m.dropout_p >= 0.0 && m.dropout_p < 1.0)) throw ValidationError("dropout p must be in [0,1)", m.name);
        m.out_shape = in;
        params(0);
        break;
      case ModuleKind::ResidualAdd:
        m.out_shape = in;
        params(0);
        break;
      case ModuleKind::Flatten: {
        m.out_shape = Shape{in.size(), 1, 1};
        params(0);
        if (!m.permutation.empty()) {
          if (static_cast<int>(m.permutation.size()) != in.size()) {
            throw ValidationError("flatten permutation has wrong length", m.name);
          }
          std::vector<int> sorted = m.permutation;
          std::sort(sorted.begin(), sorted.end());
          for (int i = 0; i < in.size(); ++i)
            if (sorted[static_cast<std::size_t>(i)] != i) throw ValidationError("flatten permutation is not a bijection", m.name);
        }
        break;
      }
      case ModuleKind::SoftmaxOutput:
        m.out_shape = Shape{in.size(), 1, 1};
        params(0);
        break;
    }
  }

  Shape input_shape_;
  std::vector<BasicModule<T>> modules_;
};

using Network = BasicNetwork<double>;

/// Per-parameter gradients, indexed [module][parameter].
template <typename T>
using GradientsT = std::vector<std::vector<MatrixT<T>>>;
using Gradients = GradientsT<double>;

template <typename T>
struct ModuleCache {
  MatrixT<T> mask;                  // dropout
  MatrixT<T> xhat;                  // normalizers
  std::vector<T> mean, invstd, var;  // per channel (bn) or per sample (ln)
};

/// Forward and backward record of one batch. Slot-indexed: post[s] is h,
/// pre[s] is the pre-activation z fed to the nonlinearity (equal to h for
/// slots not produced by an activation module), adjoint[s] is dL/dh.
template <typename T>
struct BasicActivations {
  Mode mode = Mode::Eval;
  bool has_adjoints = false;
  std::vector<MatrixT<T>> post;
  std::vector<MatrixT<T>> pre;
  std::vector<MatrixT<T>> adjoint;
  std::vector<ModuleCache<T>> caches;

  const MatrixT<T>& output() const { return post.back(); }
  Eigen::Index batch_size() const { return post.empty() ? 0 : post.front().rows(); }
};

using BatchActivations = BasicActivations<double>;

namespace detail {

template <typename T>
MatrixT<T> linear_forward(const BasicModule<T>& m, const MatrixT<T>& x) {
  const auto& w = m.params[0];
  const auto& b = m.params[1];
  const Eigen::Index n = x.rows(), out = w.rows(), in = w.cols();
  MatrixT<T> z(n, out);
  for (Eigen::Index s = 0; s < n; ++s) {
    const T* xr = x.data() + s * in;
    for (Eigen::Index o = 0; o < out; ++o) {
      const T* wr = w.data() + o * in;
      T acc = T(0);
      for (Eigen::Index i = 0; i < in; ++i) acc += wr[i] * xr[i];
      z(s, o) = acc + b(o, 0);
    }
  }
  return z;
}

template <typename T>
void linear_backward(const BasicModule<T>& m, const MatrixT<T>& x, const MatrixT<T>& dz, MatrixT<T>& dx,
                     std::vector<MatrixT<T>>& grads) {
  const auto& w = m.params[0];
  const Eigen::Index n = x.rows(), out = w.rows(), in = w.cols();
  MatrixT<T> dw = MatrixT<T>::Zero(out, in);
  MatrixT<T> db = MatrixT<T>::Zero(out, 1);
  dx = MatrixT<T>::Zero(n, in);
  for (Eigen::Index s = 0; s < n; ++s) {
    const T* xr = x.data() + s * in;
    T* dxr = dx.data() + s * in;
    for (Eigen::Index o = 0; o < out; ++o) {
      const T g = dz(s, o);
      const T* wr = w.data() + o * in;
      T* dwr = dw.data() + o * in;
      for (Eigen::Index i = 0; i < in; ++i) {
        dxr[i] += g * wr[i];
        dwr[i] += g * xr[i];
      }
      db(o, 0) += g;
    }
  }
  grads = {std::move(dw), std::move(db)};
}

template <typename T>
MatrixT<T> conv_forward(const BasicModule<T>& m, const MatrixT<T>& x) {
  const Shape in = m.in_shape, out = m.out_shape;
  const auto& w = m.params[0];
  const auto& b = m.params[1];
  const int k = m.kernel;
  MatrixT<T> y(x.rows(), out.size());
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    for (int co = 0; co < out.channels; ++co) {
      for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
          T acc = T(0);
          for (int ci = 0; ci < in.channels; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * m.stride - m.padding + ky;
              if (iy < 0 || iy >= in.height) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * m.stride - m.padding + kx;
                if (ix < 0 || ix >= in.width) continue;
                acc += w(co, (ci * k + ky) * k + kx) * x(s, (ci * in.height + iy) * in.width + ix);
              }
            }
          }
          y(s, (co * out.height + oy) * out.width + ox) = acc + b(co, 0);
        }
      }
    }
  }
  return y;
}

template <typename T>
void conv_backward(const BasicModule<T>& m, const MatrixT<T>& x, const MatrixT<T>& dy, MatrixT<T>& dx,
                   std::vector<MatrixT<T>>& grads) {
  const Shape in = m.in_shape, out = m.out_shape;
  const auto& w = m.params[0];
  const int k = m.kernel;
  MatrixT<T> dw = MatrixT<T>::Zero(w.rows(), w.cols());
  MatrixT<T> db = MatrixT<T>::Zero(out.channels, 1);
  dx = MatrixT<T>::Zero(x.rows(), x.cols());
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    for (int co = 0; co < out.channels; ++co) {
      for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
          const T g = dy(s, (co * out.height + oy) * out.width + ox);
          db(co, 0) += g;
          for (int ci = 0; ci < in.channels; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * m.stride - m.padding + ky;
              if (iy < 0 || iy >= in.height) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * m.stride - m.padding + kx;
                if (ix < 0 || ix >= in.width) continue;
                const int col = (ci * k + ky) * k + kx;
                const int feat = (ci * in.height + iy) * in.width + ix;
                dw(co, col) += g * x(s, feat);
                dx(s, feat) += g * w(co, col);
              }
            }
          }
        }
      }
    }
  }
  grads = {std::move(dw), std::move(db)};
}

// Normalizes groups of entries. For batchnorm a group is one channel over
// (sample, spatial); for layernorm it is one sample over all features.
template <typename T>
MatrixT<T> batchnorm_forward(const BasicModule<T>& m, const MatrixT<T>& x, Mode mode, ModuleCache<T>& cache) {
  const int c = m.in_shape.channels, sp = m.in_shape.spatial();
  const Eigen::Index n = x.rows();
  const T count = T(n * sp);
  const auto& gamma = m.params[0];
  const auto& beta = m.params[1];
  cache.mean.assign(static_cast<std::size_t>(c), T(0));
  cache.invstd.assign(static_cast<std::size_t>(c), T(0));
  cache.var.assign(static_cast<std::size_t>(c), T(0));
  cache.xhat.resize(n, x.cols());
  MatrixT<T> y(n, x.cols());
  for (int ch = 0; ch < c; ++ch) {
    T mean, var;
    if (mode == Mode::Train) {
      T acc = T(0);
      for (Eigen::Index s = 0; s < n; ++s)
        for (int p = 0; p < sp; ++p) acc += x(s, ch * sp + p);
      mean = acc / count;
      T sq = T(0);
      for (Eigen::Index s = 0; s < n; ++s)
        for (int p = 0; p < sp; ++p) {
          const T d = x(s, ch * sp + p) - mean;
          sq += d * d;
        }
      var = sq / count;
    } else {
      mean = m.buffers[0](ch, 0);
      var = m.buffers[1](ch, 0);
    }
    const T inv = T(1) / std::sqrt(var + T(m.eps));
    cache.mean[static_cast<std::size_t>(ch)] = mean;
    cache.var[static_cast<std::size_t>(ch)] = var;
    cache.invstd[static_cast<std::size_t>(ch)] = inv;
    for (Eigen::Index s = 0; s < n; ++s) {
      for (int p = 0; p < sp; ++p) {
        const int f = ch * sp + p;
        const T xh = (x(s, f) - mean) * inv;
        cache.xhat(s, f) = xh;
        y(s, f) = gamma(ch, 0) * xh + beta(ch, 0);
      }
    }
  }
  return y;
}

template <typename T>
void batchnorm_backward(const BasicModule<T>& m, const MatrixT<T>& dy, Mode mode, const ModuleCache<T>& cache,
                        MatrixT<T>& dx, std::vector<MatrixT<T>>& grads) {
  const int c = m.in_shape.channels, sp = m.in_shape.spatial();
  const Eigen::Index n = dy.rows();
  const T count = T(n * sp);
  const auto& gamma = m.params[0];
  MatrixT<T> dgamma = MatrixT<T>::Zero(c, 1);
  MatrixT<T> dbeta = MatrixT<T>::Zero(c, 1);
  dx.resize(n, dy.cols());
  for (int ch = 0; ch < c; ++ch) {
    T sum_dxh = T(0), sum_dxh_xh = T(0);
    for (Eigen::Index s = 0; s < n; ++s) {
      for (int p = 0; p < sp; ++p) {
        const int f = ch * sp + p;
        dgamma(ch, 0) += dy(s, f) * cache.xhat(s, f);
        dbeta(ch, 0) += dy(s, f);
        const T dxh = dy(s, f) * gamma(ch, 0);
        sum_dxh += dxh;
        sum_dxh_xh += dxh * cache.xhat(s, f);
      }
    }
    const T inv = cache.invstd[static_cast<std::size_t>(ch)];
    for (Eigen::Index s = 0; s < n; ++s) {
      for (int p = 0; p < sp; ++p) {
        const int f = ch * sp + p;
        const T dxh = dy(s, f) * gamma(ch, 0);
        if (mode == Mode::Train) {
          dx(s, f) = inv / count * (count * dxh - sum_dxh - cache.xhat(s, f) * sum_dxh_xh);
        } else {
          dx(s, f) = dxh * inv;
        }
      }
    }
  }
  grads = {std::move(dgamma), std::move(dbeta)};
}

template <typename T>
MatrixT<T> layernorm_forward(const BasicModule<T>& m, const MatrixT<T>& x, ModuleCache<T>& cache) {
  const Eigen::Index n = x.rows(), f = x.cols();
  const auto& gamma = m.params[0];
  const auto& beta = m.params[1];
  cache.mean.assign(static_cast<std::size_t>(n), T(0));
  cache.invstd.assign(static_cast<std::size_t>(n), T(0));
  cache.xhat.resize(n, f);
  MatrixT<T> y(n, f);
  for (Eigen::Index s = 0; s < n; ++s) {
    T acc = T(0);
    for (Eigen::Index j = 0; j < f; ++j) acc += x(s, j);
    const T mean = acc / T(f);
    T sq = T(0);
    for (Eigen::Index j = 0; j < f; ++j) {
      const T d = x(s, j) - mean;
      sq += d * d;
    }
    const T inv = T(1) / std::sqrt(sq / T(f) + T(m.eps));
    cache.mean[static_cast<std::size_t>(s)] = mean;
    cache.invstd[static_cast<std::size_t>(s)] = inv;
    for (Eigen::Index j = 0; j < f; ++j) {
      const T xh = (x(s, j) - mean) * inv;
      cache.xhat(s, j) = xh;
      y(s, j) = gamma(j, 0) * xh + beta(j, 0);
    }
  }
  return y;
}

template <typename T>
void layernorm_backward(const BasicModule<T>& m, const MatrixT<T>& dy, const ModuleCache<T>& cache, MatrixT<T>& dx,
                        std::vector<MatrixT<T>>& grads) {
  const Eigen::Index n = dy.rows(), f = dy.cols();
  const auto& gamma = m.params[0];
  MatrixT<T> dgamma = MatrixT<T>::Zero(f, 1);
  MatrixT<T> dbeta = MatrixT<T>::Zero(f, 1);
  dx.resize(n, f);
  for (Eigen::Index s = 0; s < n; ++s) {
    T sum_dxh = T(0), sum_dxh_xh = T(0);
    for (Eigen::Index j = 0; j < f; ++j) {
      dgamma(j, 0) += dy(s, j) * cache.xhat(s, j);
      dbeta(j, 0) += dy(s, j);
      const T dxh = dy(s, j) * gamma(j, 0);
      sum_dxh += dxh;
      sum_dxh_xh += dxh * cache.xhat(s, j);
    }
    const T inv = cache.invstd[static_cast<std::size_t>(s)];
    for (Eigen::Index j = 0; j < f; ++j) {
      const T dxh = dy(s, j) * gamma(j, 0);
      dx(s, j) = inv / T(f) * (T(f) * dxh - sum_dxh - cache.xhat(s, j) * sum_dxh_xh);
    }
  }
  grads = {std::move(dgamma), std::move(dbeta)};
}

}  // namespace detail

/// Forward through one module. `in2` is the second operand of residual-add
/// and ignored otherwise. For activation modules the caller's pre-activation
/// is `in` itself. Dropout draws its mask from `rng` only in train mode.
template <typename T>
MatrixT<T> module_forward(const BasicModule<T>& m, const MatrixT<T>& in, const MatrixT<T>* in2, Mode mode, Rng& rng,
                          ModuleCache<T>& cache) {
  MatrixT<T> out;
  switch (m.kind) {
    case ModuleKind::Linear: out = detail::linear_forward(m, in); break;
    case ModuleKind::Conv2d: out = detail::conv_forward(m, in); break;
    case ModuleKind::BatchNorm: out = detail::batchnorm_forward(m, in, mode, cache); break;
    case ModuleKind::LayerNorm: out = detail::layernorm_forward(m, in, cache); break;
    case ModuleKind::Activation: {
      out.resize(in.rows(), in.cols());
      const T a = T(m.gain), b = T(m.shift);
      for (Eigen::Index s = 0; s < in.rows(); ++s)
        for (Eigen::Index j = 0; j < in.cols(); ++j) {
          const T slope = m.fn == ActivationFn::Prelu ? m.params[0](j, 0) : T(0);
          out(s, j) = activate(m.fn, a * in(s, j) + b, slope);
        }
      break;
    }
    case ModuleKind::Dropout: {
      if (mode == Mode::Train && m.dropout_p > 0.0) {
        cache.mask.resize(in.rows(), in.cols());
        std::bernoulli_distribution keep(1.0 - m.dropout_p);
        const T scale = T(1) / (T(1) - T(m.dropout_p));
        for (Eigen::Index k = 0; k < cache.mask.size(); ++k) cache.mask.data()[k] = keep(rng) ? scale : T(0);
        out = in.cwiseProduct(cache.mask);
      } else {
        cache.mask.resize(0, 0);
        out = in;
      }
      break;
    }
    case ModuleKind::ResidualAdd:
      if (in2 == nullptr) throw Error("residual-add needs two operands", m.name);
      out = in + *in2;
      break;
    case ModuleKind::Flatten:
      if (m.permutation.empty()) {
        out = in;
      } else {
        out.resize(in.rows(), in.cols());
        for (Eigen::Index s = 0; s < in.rows(); ++s)
          for (std::size_t q = 0; q < m.permutation.size(); ++q)
            out(s, static_cast<Eigen::Index>(q)) = in(s, m.permutation[q]);
      }
      break;
    case ModuleKind::SoftmaxOutput: {
      out.resize(in.rows(), in.cols());
      for (Eigen::Index s = 0; s < in.rows(); ++s) {
        const T mx = in.row(s).maxCoeff();
        T total = T(0);
        for (Eigen::Index j = 0; j < in.cols(); ++j) {
          out(s, j) = std::exp(in(s, j) - mx);
          total += out(s, j);
        }
        out.row(s) /= total;
      }
      break;
    }
  }
  return out;
}

/// Backward through one module given its forward input `in`, output `out`
/// and cache. Writes dL/d(in) to `dx` (and the second residual operand's
/// adjoint to `dx2`) and the parameter gradients to `grads`.
template <typename T>
void module_backward(const BasicModule<T>& m, const MatrixT<T>& in, const MatrixT<T>& out, const MatrixT<T>& dy, Mode mode,
                     const ModuleCache<T>& cache, MatrixT<T>& dx, MatrixT<T>* dx2, std::vector<MatrixT<T>>& grads) {
  grads.clear();
  switch (m.kind) {
    case ModuleKind::Linear: detail::linear_backward(m, in, dy, dx, grads); break;
    case ModuleKind::Conv2d: detail::conv_backward(m, in, dy, dx, grads); break;
    case ModuleKind::BatchNorm: detail::batchnorm_backward(m, dy, mode, cache, dx, grads); break;
    case ModuleKind::LayerNorm: detail::layernorm_backward(m, dy, cache, dx, grads); break;
    case ModuleKind::Activation: {
      dx.resize(in.rows(), in.cols());
      const T a = T(m.gain), b = T(m.shift);
      MatrixT<T> dslope;
      if (m.fn == ActivationFn::Prelu) dslope = MatrixT<T>::Zero(in.cols(), 1);
      for (Eigen::Index s = 0; s < in.rows(); ++s)
        for (Eigen::Index j = 0; j < in.cols(); ++j) {
          const T u = a * in(s, j) + b;
          const T slope = m.fn == ActivationFn::Prelu ? m.params[0](j, 0) : T(0);
          dx(s, j) = dy(s, j) * a * activate_derivative(m.fn, u, slope);
          if (m.fn == ActivationFn::Prelu && !(u > T(0))) dslope(j, 0) += dy(s, j) * u;
        }
      if (m.fn == ActivationFn::Prelu) grads = {std::move(dslope)};
      break;
    }
    case ModuleKind::Dropout: dx = cache.mask.size() == 0 ? dy : MatrixT<T>(dy.cwiseProduct(cache.mask)); break;
    case ModuleKind::ResidualAdd:
      dx = dy;
      if (dx2 != nullptr) *dx2 = dy;
      break;
    case ModuleKind::Flatten:
      if (m.permutation.empty()) {
        dx = dy;
      } else {
        dx = MatrixT<T>::Zero(dy.rows(), dy.cols());
        for (Eigen::Index s = 0; s < dy.rows(); ++s)
          for (std::size_t q = 0; q < m.permutation.size(); ++q)
            dx(s, m.permutation[q]) += dy(s, static_cast<Eigen::Index>(q));
      }
      break;
    case ModuleKind::SoftmaxOutput: {
      dx.resize(dy.rows(), dy.cols());
      for (Eigen::Index s = 0; s < dy.rows(); ++s) {
        T dot = T(0);
        for (Eigen::Index j = 0; j < dy.cols(); ++j) dot += dy(s, j) * out(s, j);
        for (Eigen::Index j = 0; j < dy.cols(); ++j) dx(s, j) = out(s, j) * (dy(s, j) - dot);
      }
      break;
    }
  }
}

/// Forward pass over the whole DAG. `seed` drives dropout masks and is only
/// consumed in train mode.
template <typename T>
BasicActivations<T> forward(const BasicNetwork<T>& net, const MatrixT<T>& x, Mode mode, std::uint64_t seed = 0) {
  if (x.cols() != net.input_shape().size()) {
    const std::string who = net.modules().empty() ? std::string("input") : net.modules().front().name;
    throw ValidationError("input batch has " + std::to_string(x.cols()) + " features, expected " +
                              std::to_string(net.input_shape().size()),
                          who);
  }
  if (x.rows() == 0) throw ValidationError("empty input batch", "input");
  Rng rng(seed);
  BasicActivations<T> acts;
  acts.mode = mode;
  const std::size_t slots = static_cast<std::size_t>(net.num_slots());
  acts.post.resize(slots);
  acts.pre.resize(slots);
  acts.caches.resize(net.modules().size());
  acts.post[0] = x;
  acts.pre[0] = x;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    const MatrixT<T>& in = acts.post[static_cast<std::size_t>(m.inputs[0])];
    const MatrixT<T>* in2 = m.inputs.size() > 1 ? &acts.post[static_cast<std::size_t>(m.inputs[1])] : nullptr;
    MatrixT<T> out = module_forward(m, in, in2, mode, rng, acts.caches[i]);
    acts.pre[i + 1] = m.kind == ModuleKind::Activation ? in : out;
    acts.post[i + 1] = std::move(out);
  }
  return acts;
}

/// Backward pass. `output_adjoint` is dL/dh at the output slot. Adjoints for
/// every slot are stored in `acts`; parameter gradients are returned.
template <typename T>
GradientsT<T> backward(const BasicNetwork<T>& net, BasicActivations<T>& acts, const MatrixT<T>& output_adjoint) {
  if (acts.post.size() != static_cast<std::size_t>(net.num_slots())) {
    throw Error("backward called without a matching forward pass");
  }
  const auto& out = acts.post.back();
  if (output_adjoint.rows() != out.rows() || output_adjoint.cols() != out.cols()) {
    throw ValidationError("output adjoint shape does not match network output", "loss");
  }
  acts.adjoint.assign(acts.post.size(), MatrixT<T>());
  for (std::size_t s = 0; s < acts.post.size(); ++s)
    acts.adjoint[s] = MatrixT<T>::Zero(acts.post[s].rows(), acts.post[s].cols());
  acts.adjoint.back() = output_adjoint;
  GradientsT<T> grads(net.modules().size());

  for (std::size_t i = net.modules().size(); i-- > 0;) {
    const auto& m = net.modules()[i];
    const auto a = static_cast<std::size_t>(m.inputs[0]);
    MatrixT<T> dx, dx2;
    module_backward(m, acts.post[a], acts.post[i + 1], acts.adjoint[i + 1], acts.mode, acts.caches[i], dx,
                    m.inputs.size() > 1 ? &dx2 : nullptr, grads[i]);
    acts.adjoint[a] += dx;
    if (m.inputs.size() > 1) acts.adjoint[static_cast<std::size_t>(m.inputs[1])] += dx2;
  }
  acts.has_adjoints = true;
  return grads;
}

// Non-template entry points so Eigen expressions convert for the default
// double network.
inline BatchActivations forward(const Network& net, const Matrix& x, Mode mode, std::uint64_t seed = 0) {
  return forward<double>(net, x, mode, seed);
}

inline Gradients backward(const Network& net, BatchActivations& acts, const Matrix& output_adjoint) {
  return backward<double>(net, acts, output_adjoint);
}

/// Applies the running-statistics update of a train-mode forward pass
/// (momentum update, unbiased variance) to every batchnorm module.
template <typename T>
void update_running_stats(BasicNetwork<T>& net, const BasicActivations<T>& acts) {
  if (acts.mode != Mode::Train) return;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    auto& m = net.modules()[i];
    if (m.kind != ModuleKind::BatchNorm) continue;
    const auto& c = acts.caches[i];
    const T count = T(acts.batch_size() * m.in_shape.spatial());
    const T unbias = count > T(1) ? count / (count - T(1)) : T(1);
    const T mom = T(m.momentum);
    for (int ch = 0; ch < m.in_shape.channels; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      m.buffers[0](ch, 0) = (T(1) - mom) * m.buffers[0](ch, 0) + mom * c.mean[k];
      m.buffers[1](ch, 0) = (T(1) - mom) * m.buffers[1](ch, 0) + mom * c.var[k] * unbias;
    }
  }
}

enum class LossKind { Mse, CrossEntropy };

inline std::string to_string(LossKind k) { return k == LossKind::Mse ? "mse" : "cross_entropy"; }

inline LossKind loss_from_string(const std::string& s) {
  if (s == "mse") return LossKind::Mse;
  if (s == "cross_entropy" || s == "cross-entropy" || s == "ce") return LossKind::CrossEntropy;
  throw ValidationError("unknown loss '" + s + "'");
}

/// MSE is the mean over all output entries of (out - y)^2. Cross-entropy
/// expects probabilities (softmax-output last) and a one-hot target and is
/// averaged over samples.
template <typename T>
T loss_value(LossKind kind, const MatrixT<T>& out, const MatrixT<T>& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) {
    throw ValidationError("target shape does not match network output", "loss");
  }
  if (kind == LossKind::Mse) {
    T acc = T(0);
    for (Eigen::Index k = 0; k < out.size(); ++k) {
      const T d = out.data()[k] - target.data()[k];
      acc += d * d;
    }
    return acc / T(out.size());
  }
  T acc = T(0);
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (target.data()[k] != T(0)) acc -= target.data()[k] * std::log(out.data()[k]);
  }
  return acc / T(out.rows());
}

template <typename T>
MatrixT<T> loss_gradient(LossKind kind, const MatrixT<T>& out, const MatrixT<T>& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) {
    throw ValidationError("target shape does not match network output", "loss");
  }
  MatrixT<T> g(out.rows(), out.cols());
  if (kind == LossKind::Mse) {
    const T scale = T(2) / T(out.size());
    for (Eigen::Index k = 0; k < out.size(); ++k) g.data()[k] = scale * (out.data()[k] - target.data()[k]);
    return g;
  }
  const T scale = T(-1) / T(out.rows());
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    g.data()[k] = target.data()[k] == T(0) ? T(0) : scale * target.data()[k] / out.data()[k];
  }
  return g;
}

/// Convenience: forward + loss + backward on one batch.
template <typename T>
struct BasicStepResult {
  T loss;
  GradientsT<T> grads;
  BasicActivations<T> acts;
};

template <typename T>
BasicStepResult<T> loss_and_gradients(const BasicNetwork<T>& net, const MatrixT<T>& x, const MatrixT<T>& y,
                                      LossKind loss, Mode mode, std::uint64_t seed = 0) {
  auto acts = forward(net, x, mode, seed);
  T l = loss_value(loss, acts.output(), y);
  auto g = backward(net, acts, loss_gradient(loss, acts.output(), y));
  return {l, std::move(g), std::move(acts)};
}

}  // namespace lop
