#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

#include <Eigen/Eigenvalues>

#include "lop/core/common.hpp"

namespace lop {

/// Nodes and weights of a quadrature rule; weights sum to the measure's mass.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  template <typename F>
  double integrate(F&& f) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * f(nodes[i]);
    return acc;
  }
};

namespace detail {

// Golub-Welsch: eigen-decomposition of the symmetric Jacobi matrix with zero
// diagonal and off-diagonal `beta[k]`; weight = mass * (first eigenvector
// component)^2.
inline QuadratureRule golub_welsch(const std::vector<double>& beta, double mass) {
  const int n = static_cast<int>(beta.size()) + 1;
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k + 1 < n; ++k) j(k, k + 1) = j(k + 1, k) = beta[static_cast<std::size_t>(k)];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  QuadratureRule r;
  for (int i = 0; i < n; ++i) {
    r.nodes.push_back(es.eigenvalues()(i));
    const double v = es.eigenvectors()(0, i);
    r.weights.push_back(mass * v * v);
  }
  // Symmetric measures: make the rule exactly symmetric so even/odd parts of
  // an integrand separate cleanly.
  for (int i = 0; i < n / 2; ++i) {
    const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(n - 1 - i);
    const double x = 0.5 * (r.nodes[b] - r.nodes[a]);
    const double w = 0.5 * (r.weights[a] + r.weights[b]);
    r.nodes[a] = -x;
    r.nodes[b] = x;
    r.weights[a] = r.weights[b] = w;
  }
  if (n % 2 == 1) r.nodes[static_cast<std::size_t>(n / 2)] = 0.0;
  return r;
}

template <typename Make>
const QuadratureRule& cached_rule(int kind, int n, Make&& make) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, QuadratureRule> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({kind, n});
  if (it == cache.end()) it = cache.emplace(std::make_pair(kind, n), make()).first;
  return it->second;
}

}  // namespace detail

/// n-point Gauss-Hermite rule for the standard Gaussian measure
/// (probabilists' weight, total mass 1). Exact for polynomials of degree
/// up to 2n - 1.
inline const QuadratureRule& gauss_hermite(int n) {
  if (n < 1) throw ValidationError("quadrature order must be positive", "gauss_hermite");
  return detail::cached_rule(0, n, [n] {
    std::vector<double> beta;
    for (int k = 1; k < n; ++k) beta.push_back(std::sqrt(static_cast<double>(k)));
    return detail::golub_welsch(beta, 1.0);
  });
}

/// n-point Gauss-Legendre rule on [-1, 1].
inline const QuadratureRule& gauss_legendre(int n) {
  if (n < 1) throw ValidationError("quadrature order must be positive", "gauss_legendre");
  return detail::cached_rule(1, n, [n] {
    std::vector<double> beta;
    for (int k = 1; k < n; ++k) beta.push_back(k / std::sqrt(4.0 * k * k - 1.0));
    return detail::golub_welsch(beta, 2.0);
  });
}

/// Composite Gauss-Legendre rule for the standard Gaussian measure on
/// [-half_width, half_width]: `panels` equal panels, each additionally split at
/// every breakpoint that falls inside it, 8 nodes per piece. Breakpoints let
/// integrands with kinks or sharp transitions converge at the smooth rate.
/// The rule is mirror-symmetric whenever the breakpoint set is.
inline QuadratureRule gaussian_composite(int panels, const std::vector<double>& breakpoints,
                                         double half_width = 20.0) {
  if (panels < 1) throw ValidationError("quadrature order must be positive", "gaussian_composite");
  std::vector<double> cuts;
  for (int p = 0; p <= panels; ++p) cuts.push_back(-half_width + 2.0 * half_width * p / panels);
  for (double b : breakpoints)
    if (std::abs(b) < half_width) cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  const QuadratureRule& gl = gauss_legendre(8);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  QuadratureRule r;
  for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
    const double lo = cuts[p], hi = cuts[p + 1];
    if (hi - lo < 1e-15) continue;
    const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
      const double z = mid + half * gl.nodes[i];
      r.nodes.push_back(z);
      r.weights.push_back(half * gl.weights[i] * inv_sqrt_2pi * std::exp(-0.5 * z * z));
    }
  }
  return r;
}

/// Orthonormal probabilists' Hermite polynomials h_0..h_K at z:
/// h_{k+1} = (z h_k - sqrt(k) h_{k-1}) / sqrt(k + 1), E[h_j h_k] = [j == k].
inline std::vector<double> hermite_basis(int K, double z) {
  std::vector<double> h(static_cast<std::size_t>(K) + 1);
  h[0] = 1.0;
  if (K >= 1) h[1] = z;
  for (int k = 1; k < K; ++k) {
    const auto u = static_cast<std::size_t>(k);
    h[u + 1] = (z * h[u] - std::sqrt(static_cast<double>(k)) * h[u - 1]) / std::sqrt(k + 1.0);
  }
  return h;
}

}  // namespace lop
