#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lop/kernel/kernel.hpp"

namespace lop {
namespace {

constexpr double kPi = std::numbers::pi;

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi); }
double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Hermite coefficients of relu(a z + b), a > 0, from Stein's identity:
// a_k = a h_{k-2}(z0) pdf(z0) / sqrt(k (k-1)) for k >= 2 with z0 = -b/a.
std::vector<double> relu_coefficients(double a, double b, int K) {
  const double z0 = -b / a;
  std::vector<double> c(static_cast<std::size_t>(K) + 1);
  c[0] = a * normal_pdf(b / a) + b * normal_cdf(b / a);
  c[1] = a * normal_cdf(b / a);
  const auto h = hermite_basis(K, z0);
  for (int k = 2; k <= K; ++k) c[static_cast<std::size_t>(k)] = a * h[static_cast<std::size_t>(k - 2)] * normal_pdf(z0) / std::sqrt(k * (k - 1.0));
  return c;
}

// Arc-cosine kernel: correlation of relu(X), relu(Y) for unit Gaussians with
// correlation r.
double relu_kernel_exact(double r) {
  const double cross = (std::sqrt(1.0 - r * r) + r * (kPi - std::acos(r))) / (2.0 * kPi);
  const double mean_sq = 1.0 / (2.0 * kPi);
  return (cross - mean_sq) / (0.5 - mean_sq);
}

TEST(Quadrature, GaussHermiteIntegratesGaussianMoments) {
  const auto& rule = gauss_hermite(128);
  double total = 0.0;
  for (double w : rule.weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-13);
  const double moments[] = {1.0, 3.0, 15.0, 105.0, 945.0};
  for (int m = 1; m <= 5; ++m) {
    const double e = rule.integrate([m](double z) { return std::pow(z, 2 * m); });
    EXPECT_NEAR(e, moments[m - 1], 1e-11 * moments[m - 1]) << "E[Z^" << 2 * m << "]";
    EXPECT_NEAR(rule.integrate([m](double z) { return std::pow(z, 2 * m - 1); }), 0.0, 1e-12);
  }
}

TEST(Quadrature, HermiteBasisIsOrthonormal) {
  const auto rule = gaussian_composite(128, {});
  const int K = 30;
  std::vector<std::vector<double>> gram(K + 1, std::vector<double>(K + 1, 0.0));
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const auto h = hermite_basis(K, rule.nodes[i]);
    for (int j = 0; j <= K; ++j)
      for (int k = 0; k <= K; ++k) gram[j][k] += rule.weights[i] * h[j] * h[k];
  }
  for (int j = 0; j <= K; ++j)
    for (int k = 0; k <= K; ++k) EXPECT_NEAR(gram[j][k], j == k ? 1.0 : 0.0, 1e-11) << j << "," << k;
}

TEST(HermiteCoeffs, IdentityHasOnlyFirstCoefficient) {
  const auto c = hermite_coeffs(ScalarActivation{ActivationFn::Identity, 1.0, 0.0});
  EXPECT_NEAR(c.a[1], 1.0, 1e-13);
  for (std::size_t k = 0; k < c.a.size(); ++k) {
    if (k == 1) continue;
    EXPECT_NEAR(c.a[k], 0.0, 1e-13) << k;
  }
  EXPECT_NEAR(c.variance, 1.0, 1e-13);
}

TEST(HermiteCoeffs, ConstantIsDegenerate) {
  const auto c = hermite_coeffs(ScalarActivation{ActivationFn::Identity, 0.0, 2.5});
  EXPECT_NEAR(c.a[0], 2.5, 1e-13);
  EXPECT_NEAR(c.variance, 0.0, 1e-20);
  EXPECT_TRUE(c.degenerate);
  EXPECT_TRUE(make_kernel(ScalarActivation{ActivationFn::Identity, 0.0, 2.5}).degenerate);
  EXPECT_THROW(kernel_eval(make_kernel(ScalarActivation{ActivationFn::Identity, 0.0, 2.5}), 0.5), Error);
}

TEST(HermiteCoeffs, ReluMatchesSteinClosedForm) {
  for (double b : {0.0, -0.5, -1.5, 0.7}) {
    for (double a : {1.0, 2.5}) {
      const auto c = hermite_coeffs(ScalarActivation{ActivationFn::Relu, a, b});
      const auto exact = relu_coefficients(a, b, 30);
      for (int k = 0; k <= 30; ++k) EXPECT_NEAR(c.a[k], exact[k], 1e-12) << "a=" << a << " b=" << b << " k=" << k;
    }
  }
}

TEST(HermiteCoeffs, PlainGaussHermiteIsCoarseOnTheReluKink) {
  // The kink limits a global Gauss-Hermite rule to ~1e-3; this is why the
  // composite rule is the default.
  const auto gh = hermite_coeffs(ScalarActivation{ActivationFn::Relu, 1.0, 0.0}, 30, 128);
  const auto exact = relu_coefficients(1.0, 0.0, 30);
  double worst = 0.0;
  for (int k = 0; k <= 30; ++k) worst = std::max(worst, std::abs(gh.a[k] - exact[k]));
  EXPECT_GT(worst, 1e-5);
  EXPECT_LT(worst, 5e-3);
}

TEST(HermiteCoeffs, ReluMatchesMonteCarlo) {
  const ScalarActivation relu{ActivationFn::Relu, 1.0, 0.0};
  const auto c = hermite_coeffs(relu);
  const int K = 6;
  const std::size_t n = 1000000;
  Rng rng(17);
  std::normal_distribution<double> normal;
  std::vector<double> sum(K + 1, 0.0), sum_sq(K + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = normal(rng);
    const auto h = hermite_basis(K, z);
    for (int k = 0; k <= K; ++k) {
      const double v = relu(z) * h[k];
      sum[k] += v;
      sum_sq[k] += v * v;
    }
  }
  for (int k = 0; k <= K; ++k) {
    const double mean = sum[k] / n;
    const double se = std::sqrt((sum_sq[k] / n - mean * mean) / n);
    EXPECT_LE(std::abs(c.a[k] - mean), 3.0 * se) << "k=" << k;
  }
}

TEST(Kernel, FixedPointsAndWeights) {
  for (auto act : {ScalarActivation{ActivationFn::Relu, 1.0, 0.0}, ScalarActivation{ActivationFn::Tanh, 2.0, 0.3},
                   ScalarActivation{ActivationFn::Gelu, 1.0, -0.5}, ScalarActivation{ActivationFn::Prelu, 1.0, 0.1, 0.2}}) {
    const auto k = make_kernel(act);
    EXPECT_EQ(kernel_eval(k, 0.0), 0.0);
    EXPECT_EQ(kernel_eval(k, 1.0), 1.0);
    double total = 0.0;
    for (double w : k.weights) {
      EXPECT_GE(w, 0.0);
      total += w;
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(Kernel, LinearIsIdentityMap) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Identity, 1.7, 0.4});
  EXPECT_TRUE(k.linear);
  for (double r = -1.0; r <= 1.0; r += 0.125) EXPECT_EQ(kernel_eval(k, r), r);
}

TEST(Kernel, ReluMatchesArcCosineKernel) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, 0.0});
  for (double r = -0.9; r <= 0.9001; r += 0.05) EXPECT_NEAR(kernel_eval(k, r), relu_kernel_exact(r), 5e-5) << r;
  EXPECT_NEAR(kernel_eval(k, -1.0), relu_kernel_exact(-1.0), 1e-12);
}

TEST(Kernel, TanhGainTwoMatchesMonteCarloAtHalf) {
  const ScalarActivation act{ActivationFn::Tanh, 2.0, 0.0};
  const auto mc = kernel_mc_oracle(act, 0.5, 1000000, 5);
  EXPECT_LE(std::abs(kernel_eval(make_kernel(act), 0.5) - mc.value), 3.0 * mc.standard_error);
}

TEST(Kernel, RejectsOutOfRangeCorrelation) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Tanh, 1.0, 0.0});
  EXPECT_THROW(kernel_eval(k, 1.5), ValidationError);
}

TEST(Kernel, StrictContraction) {
  Rng rng(3);
  for (auto act : {ScalarActivation{ActivationFn::Relu, 1.0, -0.5}, ScalarActivation{ActivationFn::Tanh, 0.5, 0.0},
                   ScalarActivation{ActivationFn::Gelu, 2.0, 0.5}}) {
    const auto k = make_kernel(act);
    for (int i = 0; i < 500; ++i) {
      const double r = uniform(rng, -1.0, 1.0);
      if (r == 0.0) continue;
      EXPECT_LT(std::abs(kernel_eval(k, r)), std::abs(r)) << r;
    }
  }
}

TEST(Kernel, TruncationControl) {
  auto sup_change = [](ScalarActivation act, double edge) {
    KernelOptions lo, hi;
    lo.truncation = 20;
    hi.truncation = 40;
    const auto k20 = make_kernel(act, lo), k40 = make_kernel(act, hi);
    double sup = 0.0;
    for (int i = 0; i <= 400; ++i) {
      const double r = -edge + 2.0 * edge * i / 400;
      sup = std::max(sup, std::abs(k20(r) - k40(r)));
    }
    return sup;
  };
  EXPECT_LT(sup_change({ActivationFn::Tanh, 1.0, 0.0}, 0.99), 1e-6);
  EXPECT_LT(sup_change({ActivationFn::Gelu, 1.0, 0.0}, 0.99), 1e-6);
  // ReLU converges algebraically; the achieved sup-norm change is pinned here.
  EXPECT_LT(sup_change({ActivationFn::Relu, 1.0, 0.0}, 0.99), 2.5e-4);
}

TEST(MonteCarlo, PerfectCorrelationIsExact) {
  const auto e = kernel_mc_oracle(ScalarActivation{ActivationFn::Tanh, 1.0, 0.0}, 1.0, 10000, 1);
  EXPECT_EQ(e.value, 1.0);
}

TEST(MonteCarlo, IndependentInputsGiveZero) {
  for (auto fn : {ActivationFn::Relu, ActivationFn::Tanh, ActivationFn::Gelu}) {
    const auto e = kernel_mc_oracle(ScalarActivation{fn, 1.0, 0.2}, 0.0, 200000, 9);
    EXPECT_LE(std::abs(e.value), 3.0 * e.standard_error) << to_string(fn);
  }
}

TEST(MonteCarlo, Errors) {
  EXPECT_THROW(kernel_mc_oracle(ScalarActivation{ActivationFn::Tanh, 1.0, 0.0}, 0.5, 100, 1), ValidationError);
  EXPECT_THROW(kernel_mc_oracle(ScalarActivation{ActivationFn::Relu, 1.0, -60.0}, 0.5, 10000, 1), Error);
}

TEST(ApplyKernel, IdentityAndOnesAreFixed) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, 0.0});
  const Matrix eye = Matrix::Identity(5, 5);
  EXPECT_EQ(apply_kernel(eye, k), eye);
  const Matrix ones = Matrix::Ones(4, 4);
  EXPECT_EQ(apply_kernel(ones, k), ones);
  EXPECT_THROW(apply_kernel(Matrix::Constant(3, 3, 0.5), k), ValidationError);
}

TEST(ApplyKernel, PreservesPositiveSemidefiniteness) {
  Rng rng(21);
  const auto k = make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, 0.0});
  for (int t = 0; t < 20; ++t) {
    const Matrix c = random_correlation_matrix(rng, 8, 3 + t % 6);
    const Matrix kc = apply_kernel(c, k);
    EXPECT_GE(min_eigenvalue(kc), -1e-8);
    for (Eigen::Index i = 0; i < 8; ++i) EXPECT_EQ(kc(i, i), 1.0);
  }
}

TEST(EffectiveRanks, ClosedForms) {
  auto eye = effective_ranks(Matrix::Identity(6, 6));
  EXPECT_NEAR(eye.renyi2, 6.0, 1e-12);
  EXPECT_NEAR(eye.shannon, 6.0, 1e-12);
  auto ones = effective_ranks(Matrix::Ones(5, 5));
  EXPECT_NEAR(ones.renyi2, 1.0, 1e-12);
  EXPECT_NEAR(ones.shannon, 1.0, 1e-12);
  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 2.0, 1.0, 1.0;
  EXPECT_NEAR(effective_ranks(d).renyi2, 16.0 / 6.0, 1e-12);
  EXPECT_THROW(effective_ranks(Matrix::Zero(3, 3)), ValidationError);
}

TEST(RankGain, LinearKernelGivesOne) {
  Rng rng(2);
  const auto k = make_kernel(ScalarActivation{ActivationFn::Identity, 1.0, 0.0});
  const auto g = rank_gain_ratio(random_correlation_matrix(rng, 6, 4), k);
  EXPECT_NEAR(g.closed_form, 1.0, 1e-14);
  EXPECT_NEAR(g.recomputed, 1.0, 1e-12);
}

TEST(RankGain, TwoByTwoRelu) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, 0.0});
  Matrix c{{1.0, 0.5}, {0.5, 1.0}};
  const double k5 = kernel_eval(k, 0.5);
  const auto g = rank_gain_ratio(c, k);
  EXPECT_NEAR(g.closed_form, 2.5 / (2.0 + 2.0 * k5 * k5), 1e-15);
  EXPECT_NEAR(g.recomputed, g.closed_form, 1e-10);
  EXPECT_GT(g.closed_form, 1.0);
}

TEST(RankGain, RandomMatricesNeverLoseRank) {
  Rng rng(8);
  const auto k = make_kernel(ScalarActivation{ActivationFn::Tanh, 1.5, 0.2});
  for (int t = 0; t < 100; ++t) {
    const int d = 2 + t % 10;
    const Matrix c = random_correlation_matrix(rng, d, 1 + t % (2 * d));
    const Matrix kc = apply_kernel(c, k);
    double off_c = 0.0, off_k = 0.0;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        if (i != j) {
          off_c += c(i, j) * c(i, j);
          off_k += kc(i, j) * kc(i, j);
        }
    EXPECT_LE(off_k, off_c + 1e-12);
    const auto g = rank_gain_ratio(c, k);
    EXPECT_GE(g.closed_form, 1.0 - 1e-12);
    EXPECT_NEAR(g.recomputed, g.closed_form, 1e-10);
  }
}

TEST(Decorrelation, LinearIsZero) {
  const auto d = decorrelation_strength(make_kernel(ScalarActivation{ActivationFn::Identity, 1.0, 0.0}));
  EXPECT_EQ(d.kappa, 0.0);
}

TEST(Decorrelation, GrowsWithNegativeReluBias) {
  double prev = -1.0;
  for (double b : {0.0, -0.5, -1.0, -1.5}) {
    const auto d = decorrelation_strength(make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, b}));
    EXPECT_GT(d.kappa, prev) << b;
    EXPECT_GT(d.r_star, 0.0);
    EXPECT_LT(d.r_star, 1.0);
    prev = d.kappa;
  }
}

TEST(Decorrelation, GrowsWithTanhGain) {
  double prev = -1.0;
  for (double a : {0.5, 1.0, 2.0, 4.0}) {
    const auto d = decorrelation_strength(make_kernel(ScalarActivation{ActivationFn::Tanh, a, 0.0}));
    EXPECT_GT(d.kappa, prev) << a;
    prev = d.kappa;
  }
}

TEST(Decorrelation, RefinementBeatsGrid) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Relu, 1.0, -1.0});
  const auto d = decorrelation_strength(k);
  for (int i = 0; i <= 1000; ++i) {
    const double r = i / 1000.0;
    EXPECT_LE(r * r - k(r) * k(r), d.kappa + 1e-15);
  }
}

TEST(Regime, ReluProxyApproachesOne) {
  EXPECT_NEAR(frozen_proxy(ScalarActivation{ActivationFn::Relu, 1.0, 0.0}), 0.5, 1e-15);
  EXPECT_GT(frozen_proxy(ScalarActivation{ActivationFn::Relu, 1.0, -6.0}), 1.0 - 1e-8);
}

TEST(Regime, IdentityHasZeroDecorrelationRate) {
  EXPECT_NEAR(local_decorrelation_rate(ScalarActivation{ActivationFn::Identity, 1.0, 0.0}), 0.0, 1e-13);
}

TEST(Regime, DecorrelationRateMatchesKernelSlope) {
  // alpha = K'(1) - 1 = sum k a_k^2 / sum a_k^2 - 1; tanh's series converges
  // fast enough at gain 1 to compare against the truncated sum directly.
  const ScalarActivation act{ActivationFn::Tanh, 1.0, 0.0};
  KernelOptions opt;
  opt.truncation = 80;
  const auto c = hermite_coeffs(act, opt);
  double num = 0.0;
  for (int k = 1; k <= 80; ++k) num += k * c.a[k] * c.a[k];
  EXPECT_NEAR(local_decorrelation_rate(act), num / c.variance - 1.0, 1e-9);
}

TEST(Regime, HighGainTanhSaturatesWhileDecorrelating) {
  const ScalarActivation lo{ActivationFn::Tanh, 1.0, 0.0}, hi{ActivationFn::Tanh, 4.0, 0.0};
  EXPECT_LT(frozen_proxy(hi), frozen_proxy(lo));
  EXPECT_GT(decorrelation_strength(make_kernel(hi)).kappa, decorrelation_strength(make_kernel(lo)).kappa);
  EXPECT_GT(local_decorrelation_rate(hi), local_decorrelation_rate(lo));
}

TEST(Regime, SweepFlagsDegenerateRegimes) {
  const auto rows = regime_sweep(ActivationFn::Relu, {1.0}, {0.0, -60.0});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].degenerate);
  EXPECT_TRUE(rows[1].degenerate);
  EXPECT_TRUE(std::isnan(rows[1].kappa));
  EXPECT_EQ(rows[1].frozen_proxy, 1.0);
}

TEST(Serialize, KernelRoundTrip) {
  const auto k = make_kernel(ScalarActivation{ActivationFn::Gelu, 1.5, -0.25});
  const auto back = kernel_from_json(Json::parse(kernel_to_json(k).dump()));
  EXPECT_EQ(back.weights, k.weights);
  EXPECT_EQ(back.activation.gain, 1.5);
  EXPECT_EQ(kernel_eval(back, 0.3), kernel_eval(k, 0.3));
}

}  // namespace
}  // namespace lop
