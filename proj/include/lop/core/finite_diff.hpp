#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lop/core/network.hpp"

namespace lop {

/// Central-difference derivative of a scalar function of a vector.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> theta, double eps) {
  if (!(eps > 0.0)) throw ValidationError("eps must be positive", "finite_diff");
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + eps;
    const double up = f(theta);
    theta[i] = keep - eps;
    const double down = f(theta);
    theta[i] = keep;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

struct FiniteDiffGradient {
  Gradients grad;
  /// 1 where the +/- eps probes straddle a relu/prelu kink, so the central
  /// difference does not estimate a derivative there.
  Gradients nonsmooth;
};

namespace detail {

template <typename T>
std::vector<bool> kink_signs(const BasicNetwork<T>& net, const BasicActivations<T>& acts) {
  std::vector<bool> signs;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    if (m.kind != ModuleKind::Activation || !has_kink(m.fn)) continue;
    const auto& z = acts.pre[i + 1];
    for (Eigen::Index k = 0; k < z.size(); ++k) signs.push_back(T(m.gain) * z.data()[k] + T(m.shift) > T(0));
  }
  return signs;
}

}  // namespace detail

/// Finite-difference gradient oracle. The network is evaluated in scalar
/// type `T` (long double by default) so roundoff stays far below the
/// truncation error of the central difference. Train-mode dropout reuses
/// `seed` for every probe, keeping masks fixed.
template <typename T = long double>
FiniteDiffGradient finite_diff_gradient(const Network& net, const Matrix& x, const Matrix& y, LossKind loss,
                                        double eps, Mode mode = Mode::Eval, std::uint64_t seed = 0) {
  if (!(eps > 0.0)) throw ValidationError("eps must be positive", "finite_diff");
  BasicNetwork<T> work = net.template cast<T>();
  const MatrixT<T> xt = x.cast<T>();
  const MatrixT<T> yt = y.cast<T>();
  FiniteDiffGradient out;
  out.grad.resize(net.modules().size());
  out.nonsmooth.resize(net.modules().size());
  const T h = T(eps);
  for (std::size_t mi = 0; mi < work.modules().size(); ++mi) {
    auto& m = work.modules()[mi];
    for (auto& p : m.params) {
      Matrix g(p.rows(), p.cols());
      Matrix ns = Matrix::Zero(p.rows(), p.cols());
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        const T keep = p.data()[k];
        p.data()[k] = keep + h;
        auto up = forward(work, xt, mode, seed);
        const T lu = loss_value(loss, up.output(), yt);
        p.data()[k] = keep - h;
        auto down = forward(work, xt, mode, seed);
        const T ld = loss_value(loss, down.output(), yt);
        p.data()[k] = keep;
        g.data()[k] = static_cast<double>((lu - ld) / (T(2) * h));
        if (detail::kink_signs(work, up) != detail::kink_signs(work, down)) ns.data()[k] = 1.0;
      }
      out.grad[mi].push_back(std::move(g));
      out.nonsmooth[mi].push_back(std::move(ns));
    }
  }
  return out;
}

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  std::size_t numerically_zero = 0;
};

/// Compares backward against the finite-difference oracle entry by entry with
/// |b - f| / (|f| + 1e-12). Entries whose probes straddle a kink are skipped
/// and counted. Entries where both |b| and |f| are at most `zero_floor` are
/// structurally zero gradients (e.g. a bias feeding train-mode batchnorm):
/// both sides are pure roundoff there, so they count as agreeing.
inline GradientCheckReport gradient_check(const Network& net, const Matrix& x, const Matrix& y, LossKind loss,
                                          double eps = 1e-6, Mode mode = Mode::Eval, std::uint64_t seed = 0,
                                          double zero_floor = 1e-12) {
  auto analytic = loss_and_gradients(net, x, y, loss, mode, seed).grads;
  auto fd = finite_diff_gradient(net, x, y, loss, eps, mode, seed);
  GradientCheckReport r;
  for (std::size_t mi = 0; mi < analytic.size(); ++mi) {
    for (std::size_t pi = 0; pi < analytic[mi].size(); ++pi) {
      const auto& a = analytic[mi][pi];
      const auto& f = fd.grad[mi][pi];
      for (Eigen::Index k = 0; k < a.size(); ++k) {
        if (fd.nonsmooth[mi][pi].data()[k] != 0.0) {
          ++r.skipped_nonsmooth;
          continue;
        }
        ++r.checked;
        if (std::abs(a.data()[k]) <= zero_floor && std::abs(f.data()[k]) <= zero_floor) {
          ++r.numerically_zero;
          continue;
        }
        const double rel = std::abs(a.data()[k] - f.data()[k]) / (std::abs(f.data()[k]) + 1e-12);
        if (rel > r.max_relative_error) {
          r.max_relative_error = rel;
          r.worst_parameter = net.parameter_name(mi, pi) + "[" + std::to_string(k) + "]";
        }
      }
    }
  }
  return r;
}

}  // namespace lop
