#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/manifolds/frozen.hpp"

namespace lop {

struct CurvatureReport {
  std::vector<double> curvatures;
  std::string classification;  // stable | unstable | saddle
  double loss = 0.0;
  double noise_floor = 0.0;
  bool noise_warning = false;  // eps too small: rounding dominates the estimates
};

/// (f(x + eps v) - 2 f(x) + f(x - eps v)) / eps^2, plus the rounding level of
/// that difference: a few ulps of the largest loss value, over eps^2.
struct SecondDifference {
  double curvature = 0.0;
  double noise = 0.0;
  double center = 0.0;
};

template <typename F>
SecondDifference second_difference(F&& f, const std::vector<double>& x, const std::vector<double>& v, double eps) {
  if (!(eps > 0.0)) throw ValidationError("eps must be positive", "curvature_probe");
  if (x.size() != v.size()) throw ValidationError("direction length does not match parameters", "curvature_probe");
  std::vector<double> p = x, m = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    p[k] += eps * v[k];
    m[k] -= eps * v[k];
  }
  SecondDifference d;
  const double fp = f(p), f0 = f(x), fm = f(m);
  d.center = f0;
  d.curvature = (fp - 2.0 * f0 + fm) / (eps * eps);
  const double mag = std::max({std::abs(fp), std::abs(f0), std::abs(fm)});
  d.noise = 8.0 * std::numeric_limits<double>::epsilon() * mag / (eps * eps);
  return d;
}

/// Saddle when curvatures of both signs exceed the noise floor; unstable when
/// only negative ones do; stable otherwise (flat directions included).
inline std::string classify_curvatures(const std::vector<double>& c, double noise_floor) {
  bool pos = false, neg = false;
  for (double v : c) {
    pos = pos || v > noise_floor;
    neg = neg || v < -noise_floor;
  }
  if (pos && neg) return "saddle";
  if (neg) return "unstable";
  return "stable";
}

/// Curvature of `f` at `x` along each of `dirs`.
template <typename F>
CurvatureReport curvature_along(F&& f, const std::vector<double>& x, const std::vector<std::vector<double>>& dirs, double eps) {
  CurvatureReport r;
  std::vector<double> mags;
  for (const auto& v : dirs) {
    const SecondDifference d = second_difference(f, x, v, eps);
    r.curvatures.push_back(d.curvature);
    r.noise_floor = std::max(r.noise_floor, d.noise);
    r.loss = d.center;
    mags.push_back(std::abs(d.curvature));
  }
  r.classification = classify_curvatures(r.curvatures, r.noise_floor);
  if (!mags.empty()) {
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2), mags.end());
    r.noise_warning = mags[mags.size() / 2] < r.noise_floor;
  }
  return r;
}

namespace detail {

inline std::vector<std::size_t> parameter_offsets(const Network& net) {
  std::vector<std::size_t> off;
  std::size_t k = 0;
  for (const auto& m : net.modules())
    for (const auto& p : m.params) {
      off.push_back(k);
      k += static_cast<std::size_t>(p.size());
    }
  return off;
}

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

template <typename Directions>
CurvatureReport probe_network(const Network& net, LossKind loss, const Matrix& x, const Matrix& y, double eps, Mode mode,
                              std::uint64_t seed, Directions&& dirs) {
  Network work = net;
  auto f = [&](const std::vector<double>& theta) {
    work.set_flat_parameters(theta);
    return loss_value(loss, forward(work, x, mode, seed).output(), y);
  };
  return curvature_along(f, net.flat_parameters(), dirs, eps);
}

}  // namespace detail

/// Unit directions normal to the cloning manifold: Gaussian entries with the
/// mean of every block pair removed, so each direction is orthogonal to all
/// block-constant displacements.
inline std::vector<std::vector<double>> cloning_normal_directions(const Network& net, const CloningProfile& profile,
                                                                  int n_dirs, std::uint64_t seed) {
  Rng rng(seed);
  const auto off = detail::parameter_offsets(net);
  std::vector<std::vector<double>> dirs;
  for (int d = 0; d < n_dirs; ++d) {
    std::vector<double> v(net.num_parameters());
    for (double& x : v) x = gaussian(rng);
    std::size_t k = 0;
    for (std::size_t i = 0; i < net.modules().size(); ++i)
      for (std::size_t p = 0; p < net.modules()[i].params.size(); ++p, ++k) {
        const Eigen::Index cols = net.modules()[i].params[p].cols();
        for (const Block& g : parameter_groups(profile, i, static_cast<int>(p), cols)) {
          double mean = 0.0;
          for (int e : g) mean += v[off[k] + static_cast<std::size_t>(e)];
          mean /= static_cast<double>(g.size());
          for (int e : g) v[off[k] + static_cast<std::size_t>(e)] -= mean;
        }
      }
    detail::normalize(v);
    dirs.push_back(std::move(v));
  }
  return dirs;
}

/// Unit directions supported on the incoming parameters of frozen units.
inline std::vector<std::vector<double>> frozen_normal_directions(const Network& net, const FrozenSet& frozen, int n_dirs,
                                                                 std::uint64_t seed) {
  Rng rng(seed);
  const auto off = detail::parameter_offsets(net);
  std::vector<std::size_t> first(net.modules().size() + 1, 0);
  for (std::size_t i = 0, k = 0; i < net.modules().size(); ++i) {
    first[i] = k;
    k += net.modules()[i].params.size();
  }
  const auto entries = incoming_parameters(net, frozen);
  if (entries.empty()) throw ValidationError("no frozen units with incoming parameters", "curvature_probe");
  std::vector<std::vector<double>> dirs;
  for (int d = 0; d < n_dirs; ++d) {
    std::vector<double> v(net.num_parameters(), 0.0);
    for (const auto& e : entries) v[off[first[e.module] + e.param] + static_cast<std::size_t>(e.index)] = gaussian(rng);
    detail::normalize(v);
    dirs.push_back(std::move(v));
  }
  return dirs;
}

/// Second-difference curvature of the loss on (x, y) along `n_dirs` random
/// directions normal to the cloning manifold of `profile`.
inline CurvatureReport curvature_probe(const Network& net, const CloningProfile& profile, LossKind loss, const Matrix& x,
                                       const Matrix& y, int n_dirs = 8, double eps = 1e-3, std::uint64_t seed = 0,
                                       Mode mode = Mode::Eval) {
  return detail::probe_network(net, loss, x, y, eps, mode, seed, cloning_normal_directions(net, profile, n_dirs, seed));
}

/// Same probe along the incoming parameters of a frozen set.
inline CurvatureReport curvature_probe(const Network& net, const FrozenSet& frozen, LossKind loss, const Matrix& x,
                                       const Matrix& y, int n_dirs = 8, double eps = 1e-3, std::uint64_t seed = 0,
                                       Mode mode = Mode::Eval) {
  return detail::probe_network(net, loss, x, y, eps, mode, seed, frozen_normal_directions(net, frozen, n_dirs, seed));
}

inline Json curvature_to_json(const CurvatureReport& r) {
  return Json{{"curvatures", r.curvatures},
              {"classification", r.classification},
              {"loss", r.loss},
              {"noise_floor", r.noise_floor},
              {"noise_warning", r.noise_warning}};
}

}  // namespace lop
