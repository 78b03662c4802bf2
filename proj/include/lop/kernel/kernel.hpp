#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "lop/core/activation.hpp"
#include "lop/core/json.hpp"
#include "lop/kernel/quadrature.hpp"

namespace lop {

enum class QuadratureKind { Composite, GaussHermite };

inline std::string to_string(QuadratureKind q) { return q == QuadratureKind::Composite ? "composite" : "gauss_hermite"; }

inline QuadratureKind quadrature_from_string(const std::string& s) {
  if (s == "composite") return QuadratureKind::Composite;
  if (s == "gauss_hermite" || s == "gauss-hermite") return QuadratureKind::GaussHermite;
  throw ValidationError("unknown quadrature '" + s + "'");
}

/// `quad_order` is the node count of the Gauss-Hermite rule, or the panel
/// count of the composite rule (8 Gauss-Legendre nodes per panel on
/// [-20, 20], with extra cuts where phi(az + b) bends).
struct KernelOptions {
  int truncation = 30;
  int quad_order = 128;
  QuadratureKind quadrature = QuadratureKind::Composite;
};

/// Expansion of z -> phi(a z + b) in the orthonormal Hermite basis.
/// variance = sum_{k>=1} a_k^2 = Var phi(aZ + b), split by the parity of k.
struct HermiteCoefficients {
  std::vector<double> a;  // a_0..a_K
  double variance = 0.0;
  double variance_even = 0.0;
  double variance_odd = 0.0;
  double second_moment = 0.0;
  bool degenerate = false;
};

namespace detail {

inline QuadratureRule gaussian_rule(const ScalarActivation& act, const KernelOptions& opt) {
  if (opt.quadrature == QuadratureKind::GaussHermite) return gauss_hermite(opt.quad_order);
  std::vector<double> cuts;
  if (act.gain != 0.0 && !act.is_linear()) {
    const double z0 = -act.shift / act.gain;
    cuts = {z0, -z0};
  }
  return gaussian_composite(opt.quad_order, cuts);
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("non-finite quadrature value in ") + what, "hermite_coeffs");
}

}  // namespace detail

inline HermiteCoefficients hermite_coeffs(const ScalarActivation& act, const KernelOptions& opt = {}) {
  if (opt.truncation < 1) throw ValidationError("truncation must be at least 1", "hermite_coeffs");
  if (opt.quadrature == QuadratureKind::GaussHermite && opt.quad_order < 2 * opt.truncation) {
    throw ValidationError("Gauss-Hermite order must be at least 2K", "hermite_coeffs");
  }
  const int K = opt.truncation;
  const QuadratureRule rule = detail::gaussian_rule(act, opt);
  HermiteCoefficients c;
  c.a.assign(static_cast<std::size_t>(K) + 1, 0.0);
  double even_sq = 0.0, odd_sq = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double z = rule.nodes[i], w = rule.weights[i];
    const double g = act(z), gm = act(-z);
    detail::check_finite(g, "phi");
    const auto h = hermite_basis(K, z);
    for (int k = 0; k <= K; ++k) c.a[static_cast<std::size_t>(k)] += w * g * h[static_cast<std::size_t>(k)];
    c.second_moment += w * g * g;
    const double ge = 0.5 * (g + gm), go = 0.5 * (g - gm);
    even_sq += w * ge * ge;
    odd_sq += w * go * go;
  }
  for (double v : c.a) detail::check_finite(v, "coefficient");
  const double a0 = c.a[0];
  c.variance_even = std::max(0.0, even_sq - a0 * a0);
  c.variance_odd = std::max(0.0, odd_sq);
  c.variance = c.variance_even + c.variance_odd;
  c.degenerate = !(c.variance > 1e-12 * c.second_moment) || c.variance == 0.0;
  return c;
}

inline HermiteCoefficients hermite_coeffs(const ScalarActivation& act, int K, int quad_order) {
  return hermite_coeffs(act, KernelOptions{K, quad_order, QuadratureKind::GaussHermite});
}

/// K_phi(r) = sum_{k=1..K} w_k r^k. The weights are a_k^2 / Var phi; the
/// variance beyond order K, computed separately for even and odd k, is
/// folded into the last even and last odd retained weight. This keeps the
/// weights a convex combination (K(1) = 1), keeps K(-1) exact, and removes
/// the renormalization bias of dividing by the truncated sum.
struct CorrelationKernel {
  ScalarActivation activation;
  KernelOptions options;
  std::vector<double> coefficients;  // a_0..a_K
  std::vector<double> weights;       // w_1..w_K at index k - 1
  double variance = 0.0;
  bool degenerate = false;
  bool linear = false;

  double operator()(double r) const;
};

inline CorrelationKernel make_kernel(const ScalarActivation& act, const KernelOptions& opt = {}) {
  if (opt.truncation < 2) throw ValidationError("kernel truncation must be at least 2", "make_kernel");
  CorrelationKernel k;
  k.activation = act;
  k.options = opt;
  const HermiteCoefficients c = hermite_coeffs(act, opt);
  k.coefficients = c.a;
  k.variance = c.variance;
  k.degenerate = c.degenerate;
  const int K = opt.truncation;
  k.weights.assign(static_cast<std::size_t>(K), 0.0);
  if (k.degenerate) return k;
  if (act.is_linear()) {
    k.linear = true;
    k.weights[0] = 1.0;
    return k;
  }
  double kept_even = 0.0, kept_odd = 0.0;
  for (int j = 1; j <= K; ++j) {
    const double sq = c.a[static_cast<std::size_t>(j)] * c.a[static_cast<std::size_t>(j)];
    k.weights[static_cast<std::size_t>(j - 1)] = sq;
    (j % 2 == 0 ? kept_even : kept_odd) += sq;
  }
  const int last_even = K % 2 == 0 ? K : K - 1;
  const int last_odd = K % 2 == 1 ? K : K - 1;
  k.weights[static_cast<std::size_t>(last_even - 1)] += std::max(0.0, c.variance_even - kept_even);
  k.weights[static_cast<std::size_t>(last_odd - 1)] += std::max(0.0, c.variance_odd - kept_odd);
  double total = 0.0;
  for (double w : k.weights) total += w;
  for (double& w : k.weights) w /= total;
  return k;
}

inline double kernel_eval(const CorrelationKernel& k, double r) {
  if (k.degenerate) throw Error("kernel is degenerate (frozen regime)", "kernel_eval");
  if (!(r >= -1.0 - 1e-12 && r <= 1.0 + 1e-12)) throw ValidationError("correlation outside [-1, 1]", "kernel_eval");
  r = std::clamp(r, -1.0, 1.0);
  if (r == 1.0) return 1.0;
  double acc = 0.0;
  for (std::size_t j = k.weights.size(); j-- > 0;) acc = acc * r + k.weights[j];
  return acc * r;
}

inline double CorrelationKernel::operator()(double r) const { return kernel_eval(*this, r); }

struct McEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// Pearson correlation of (phi(aX+b), phi(aY+b)) over n bivariate standard
/// Gaussian pairs with correlation r: X = Z1, Y = r Z1 + sqrt(1 - r^2) Z2.
/// The standard error comes from `batches` equal batch estimates.
inline McEstimate kernel_mc_oracle(const ScalarActivation& act, double r, std::size_t n, std::uint64_t seed,
                                   int batches = 100) {
  if (n < 10000) throw ValidationError("Monte-Carlo oracle needs n >= 1e4", "kernel_mc_oracle");
  if (!(r >= -1.0 && r <= 1.0)) throw ValidationError("correlation outside [-1, 1]", "kernel_mc_oracle");
  Rng rng(seed);
  std::normal_distribution<double> normal;
  const double s = std::sqrt(std::max(0.0, 1.0 - r * r));
  std::vector<double> u(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = normal(rng), z2 = normal(rng);
    u[i] = act(z1);
    v[i] = r == 1.0 ? u[i] : act(r * z1 + s * z2);
  }
  auto pearson = [&](std::size_t lo, std::size_t hi) {
    double mu = 0.0, mv = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      mu += u[i];
      mv += v[i];
    }
    mu /= static_cast<double>(hi - lo);
    mv /= static_cast<double>(hi - lo);
    double suv = 0.0, suu = 0.0, svv = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      const double du = u[i] - mu, dv = v[i] - mv;
      suv += du * dv;
      suu += du * du;
      svv += dv * dv;
    }
    if (suu <= 0.0 || svv <= 0.0) throw Error("activation outputs have zero variance", "kernel_mc_oracle");
    return suv / std::sqrt(suu * svv);
  };
  McEstimate e;
  if (r == 1.0) {
    pearson(0, n);
    e.value = 1.0;
    return e;
  }
  e.value = pearson(0, n);
  const std::size_t per = n / static_cast<std::size_t>(batches);
  double m = 0.0, m2 = 0.0;
  for (int b = 0; b < batches; ++b) {
    const double rb = pearson(static_cast<std::size_t>(b) * per, static_cast<std::size_t>(b + 1) * per);
    m += rb;
    m2 += rb * rb;
  }
  m /= batches;
  const double var = std::max(0.0, (m2 - batches * m * m) / (batches - 1));
  e.standard_error = std::sqrt(var / batches);
  return e;
}

/// True when C is square, symmetric and has unit diagonal within `tol`.
inline bool is_unit_diagonal_symmetric(const Matrix& c, double tol = 1e-12) {
  if (c.rows() != c.cols()) return false;
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    if (std::abs(c(i, i) - 1.0) > tol) return false;
    for (Eigen::Index j = 0; j < i; ++j)
      if (std::abs(c(i, j) - c(j, i)) > tol) return false;
  }
  return true;
}

inline double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Entrywise K_phi(C_ij). The diagonal stays exactly 1.
inline Matrix apply_kernel(const Matrix& c, const CorrelationKernel& k) {
  if (!is_unit_diagonal_symmetric(c)) throw ValidationError("input is not a unit-diagonal symmetric matrix", "apply_kernel");
  Matrix out(c.rows(), c.cols());
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    out(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) out(i, j) = out(j, i) = kernel_eval(k, c(i, j));
  }
  return out;
}

struct EffectiveRanks {
  double renyi2 = 0.0;
  double shannon = 0.0;
};

/// er_2 = (tr M)^2 / ||M||_F^2 and exp of the entropy of lambda_i / tr M.
/// Eigenvalues below zero (roundoff on a PSD input) are treated as 0.
inline EffectiveRanks effective_ranks(const Matrix& m) {
  if (m.rows() != m.cols()) throw ValidationError("matrix must be square", "effective_ranks");
  const double tr = m.trace();
  if (!(tr > 0.0)) throw ValidationError("zero trace", "effective_ranks");
  EffectiveRanks r;
  r.renyi2 = tr * tr / m.squaredNorm();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(m), Eigen::EigenvaluesOnly);
  double total = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) total += std::max(0.0, es.eigenvalues()(i));
  double h = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double p = std::max(0.0, es.eigenvalues()(i)) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  r.shannon = std::exp(h);
  return r;
}

struct RankGain {
  double closed_form = 1.0;  // (d + sum C_ij^2) / (d + sum K(C_ij)^2)
  double recomputed = 1.0;   // er_2(K(C)) / er_2(C)
};

inline RankGain rank_gain_ratio(const Matrix& c, const CorrelationKernel& k) {
  if (k.degenerate) throw Error("kernel is degenerate (frozen regime)", "rank_gain_ratio");
  const Matrix kc = apply_kernel(c, k);
  const double d = static_cast<double>(c.rows());
  double num = d, den = d;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      if (i != j) {
        num += c(i, j) * c(i, j);
        den += kc(i, j) * kc(i, j);
      }
  RankGain g;
  g.closed_form = num / den;
  g.recomputed = effective_ranks(kc).renyi2 / effective_ranks(c).renyi2;
  return g;
}

struct Decorrelation {
  double kappa = 0.0;
  double r_star = 0.0;
};

/// kappa = max_{r in [0,1]} r^2 - K(r)^2: grid search, then golden-section
/// refinement of the best grid cell to an interval of 1e-10.
inline Decorrelation decorrelation_strength(const CorrelationKernel& k, int grid_n = 1001) {
  if (k.degenerate) throw Error("kernel is degenerate (frozen regime)", "decorrelation_strength");
  if (grid_n < 3) throw ValidationError("grid needs at least 3 points", "decorrelation_strength");
  auto f = [&](double r) {
    const double kr = kernel_eval(k, r);
    return r * r - kr * kr;
  };
  Decorrelation d;
  if (k.linear) return d;
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid_n; ++i) {
    const double v = f(static_cast<double>(i) / (grid_n - 1));
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  double lo = static_cast<double>(std::max(0, best - 1)) / (grid_n - 1);
  double hi = static_cast<double>(std::min(grid_n - 1, best + 1)) / (grid_n - 1);
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  while (hi - lo > 1e-10) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + g * (hi - lo);
      f2 = f(x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - g * (hi - lo);
      f1 = f(x1);
    }
  }
  const double mid = 0.5 * (lo + hi);
  const double fm = f(mid);
  if (fm >= best_v) {
    d.kappa = fm;
    d.r_star = mid;
  } else {
    d.kappa = best_v;
    d.r_star = static_cast<double>(best) / (grid_n - 1);
  }
  d.kappa = std::max(0.0, d.kappa);
  return d;
}

/// alpha = E[(d/dz phi(aZ+b))^2] / Var phi(aZ+b) - 1, which equals
/// K'(1) - 1 for the untruncated kernel. NaN for a degenerate regime.
inline double local_decorrelation_rate(const ScalarActivation& act, const KernelOptions& opt = {}) {
  const HermiteCoefficients c = hermite_coeffs(act, opt);
  if (c.degenerate) return std::numeric_limits<double>::quiet_NaN();
  const QuadratureRule rule = detail::gaussian_rule(act, opt);
  const double d2 = rule.integrate([&](double z) {
    const double d = act.gain * act.derivative_at(z);
    return d * d;
  });
  return d2 / c.variance - 1.0;
}

/// Saturation proxy of a regime: P(aZ + b < 0) for relu (where phi' = 0),
/// E[phi'(aZ + b)^2] for every other activation.
inline double frozen_proxy(const ScalarActivation& act, const KernelOptions& opt = {}) {
  if (act.fn == ActivationFn::Relu) {
    if (act.gain == 0.0) return act.shift <= 0.0 ? 1.0 : 0.0;
    // aZ + b < 0  <=>  sign(a) Z < -b/|a|
    const double t = -act.shift / std::abs(act.gain);
    return 0.5 * std::erfc(-t / std::sqrt(2.0));
  }
  const QuadratureRule rule = detail::gaussian_rule(act, opt);
  return rule.integrate([&](double z) {
    const double d = act.derivative_at(z);
    return d * d;
  });
}

struct RegimeRow {
  double a = 0.0;
  double b = 0.0;
  double kappa = 0.0;
  double alpha = 0.0;
  double r_star = 0.0;
  double frozen_proxy = 0.0;
  bool degenerate = false;
};

/// One row per (a, b), a-major. Degenerate regimes keep their frozen proxy
/// and report NaN for the kernel quantities.
inline std::vector<RegimeRow> regime_sweep(ActivationFn fn, const std::vector<double>& a_grid,
                                           const std::vector<double>& b_grid, const KernelOptions& opt = {},
                                           double prelu_slope = 0.25) {
  std::vector<RegimeRow> rows;
  for (double a : a_grid) {
    for (double b : b_grid) {
      const ScalarActivation act{fn, a, b, prelu_slope};
      RegimeRow row;
      row.a = a;
      row.b = b;
      row.frozen_proxy = frozen_proxy(act, opt);
      const CorrelationKernel k = make_kernel(act, opt);
      if (k.degenerate) {
        row.degenerate = true;
        row.kappa = row.alpha = row.r_star = std::numeric_limits<double>::quiet_NaN();
      } else {
        const Decorrelation d = decorrelation_strength(k);
        row.kappa = d.kappa;
        row.r_star = d.r_star;
        row.alpha = local_decorrelation_rate(act, opt);
      }
      rows.push_back(row);
    }
  }
  return rows;
}

/// Random correlation matrix: Gram matrix of `d` Gaussian vectors in
/// dimension `cols`, rescaled to unit diagonal. PSD by construction; fewer
/// columns give stronger correlations.
inline Matrix random_correlation_matrix(Rng& rng, int d, int cols) {
  if (d < 1 || cols < 1) throw ValidationError("dimensions must be positive", "random_correlation_matrix");
  Matrix g = gaussian_matrix(rng, d, cols);
  Matrix c = g * g.transpose();
  Eigen::VectorXd s = c.diagonal().cwiseSqrt().cwiseInverse();
  c = s.asDiagonal() * c * s.asDiagonal();
  for (Eigen::Index i = 0; i < d; ++i) {
    c(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) c(j, i) = c(i, j);
  }
  return c;
}

inline Json activation_to_json(const ScalarActivation& a) {
  Json j{{"fn", to_string(a.fn)}, {"gain", a.gain}, {"shift", a.shift}};
  if (a.fn == ActivationFn::Prelu) j["slope"] = a.slope;
  return j;
}

inline ScalarActivation activation_from_json(const Json& j) {
  ScalarActivation a;
  a.fn = activation_from_string(j.at("fn").get<std::string>());
  a.gain = j.value("gain", 1.0);
  a.shift = j.value("shift", 0.0);
  a.slope = j.value("slope", 0.25);
  return a;
}

inline Json kernel_to_json(const CorrelationKernel& k) {
  return Json{{"activation", activation_to_json(k.activation)},
              {"truncation", k.options.truncation},
              {"quad_order", k.options.quad_order},
              {"quadrature", to_string(k.options.quadrature)},
              {"variance", k.variance},
              {"degenerate", k.degenerate},
              {"linear", k.linear},
              {"coefficients", k.coefficients},
              {"weights", k.weights}};
}

inline CorrelationKernel kernel_from_json(const Json& j) {
  CorrelationKernel k;
  try {
    k.activation = activation_from_json(j.at("activation"));
    k.options.truncation = j.at("truncation").get<int>();
    k.options.quad_order = j.at("quad_order").get<int>();
    k.options.quadrature = quadrature_from_string(j.value("quadrature", std::string("composite")));
    k.variance = j.at("variance").get<double>();
    k.degenerate = j.at("degenerate").get<bool>();
    k.linear = j.value("linear", false);
    k.coefficients = j.at("coefficients").get<std::vector<double>>();
    k.weights = j.at("weights").get<std::vector<double>>();
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), "kernel");
  }
  if (static_cast<int>(k.weights.size()) != k.options.truncation) {
    throw ValidationError("weight count does not match truncation", "kernel.weights");
  }
  return k;
}

}  // namespace lop
