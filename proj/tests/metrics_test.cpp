#include <gtest/gtest.h>

#include <cmath>

#include "lop/core/builder.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/metrics/metrics.hpp"

namespace lop {
namespace {

TEST(Dead, AllZerosAndAllOnes) {
  EXPECT_EQ(dead_fraction(Matrix::Zero(10, 4)), 1.0);
  EXPECT_EQ(dead_fraction(Matrix::Ones(10, 4)), 0.0);
}

TEST(Dead, ThresholdIsStrictlyAboveFraction) {
  // 19 of 20 samples near zero is exactly 0.95, which is not "more than".
  Matrix h = Matrix::Zero(20, 2);
  h(0, 0) = 1.0;
  h(0, 1) = 1.0;
  EXPECT_EQ(dead_fraction(h), 0.0);
  h(0, 1) = 1e-8;
  EXPECT_EQ(dead_fraction(h), 0.5);
}

TEST(Duplicate, IdenticalPairCountsBothMembers) {
  Matrix h(3, 4);
  h << 1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 0;
  const auto r = duplicate_fraction(h);
  EXPECT_EQ(r.fraction, 0.5);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0], std::make_pair(0, 3));
}

TEST(Duplicate, OrthogonalColumnsAndZeroColumns) {
  EXPECT_EQ(duplicate_fraction(Matrix::Identity(5, 5)).fraction, 0.0);
  EXPECT_EQ(duplicate_fraction(Matrix::Zero(5, 3)).fraction, 0.0);
}

TEST(Duplicate, PerfectCloneIsAllDuplicates) {
  Network base = make_mlp(3, {4}, 2, ActivationFn::Tanh, 1);
  ClonedNetwork c = clone_network(base, 2);
  Rng rng(2);
  const Matrix x = gaussian_matrix(rng, 32, 3);
  const auto acts = forward(c.net, expand_input(x, c.profile), Mode::Eval);
  EXPECT_EQ(duplicate_fraction(acts.post[2]).fraction, 1.0);
}

TEST(Saturated, ZeroGradientIsSaturatedAndEqualIsNot) {
  Rng rng(3);
  const Matrix h = gaussian_matrix(rng, 50, 3);
  EXPECT_EQ(saturated_fraction(h, Matrix::Zero(50, 3)), 1.0);
  EXPECT_EQ(saturated_fraction(h, h), 0.0);
  EXPECT_THROW(saturated_fraction(h, Matrix::Zero(50, 2)), Error);
}

TEST(Saturated, FrozenReluUnitIsCounted) {
  Network net = make_mlp(3, {4}, 1, ActivationFn::Relu, 5);
  net.module(0).params[0].row(1).setConstant(0.1);
  net.module(0).params[1](1, 0) = -10.0;
  Rng rng(5);
  const Matrix x = uniform_matrix(rng, 64, 3, 0.0, 1.0);
  const auto r = loss_and_gradients(net, x, Matrix(Matrix::Zero(64, 1)), LossKind::Mse, Mode::Eval);
  const MetricsReport rep = compute_metrics(net, r.acts);
  ASSERT_EQ(rep.layers.size(), 1u);
  EXPECT_GE(rep.layers[0].sat_frac, 0.25);
  EXPECT_GE(rep.layers[0].dead_frac, 0.25);
}

TEST(Rank, OrthonormalColumnsHaveFullEffectiveRank) {
  const RankMetrics r = rank_metrics(Matrix::Identity(6, 6) * 3.0);
  EXPECT_NEAR(r.effective_rank, 6.0, 1e-12);
}

TEST(Rank, RankOneHasEffectiveRankOne) {
  Rng rng(4);
  const Vector u = gaussian_matrix(rng, 20, 1);
  const Vector v = gaussian_matrix(rng, 5, 1);
  EXPECT_NEAR(rank_metrics(u * v.transpose()).effective_rank, 1.0, 1e-9);
}

// Centered 4 x 3 matrix with singular values (2, 1, 1): columns of the
// Helmert basis orthogonal to the ones vector.
TEST(Rank, StableRankFromSingularValues) {
  Matrix u(4, 3);
  u.col(0) << 1, -1, 0, 0;
  u.col(1) << 1, 1, -2, 0;
  u.col(2) << 1, 1, 1, -3;
  for (int j = 0; j < 3; ++j) u.col(j).normalize();
  const Matrix h = u * Vector(Eigen::Vector3d(2, 1, 1)).asDiagonal();
  EXPECT_NEAR(rank_metrics(h).stable_rank, 2.0, 1e-12);
}

TEST(Rank, ZeroMatrixIsDegenerate) {
  const RankMetrics r = rank_metrics(Matrix::Zero(5, 3));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.effective_rank, 0.0);
  EXPECT_EQ(r.stable_rank, 0.0);
  EXPECT_THROW(rank_metrics(Matrix::Ones(1, 3)), Error);
}

TEST(Rank, BoundsAndScaleInvariance) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix h = gaussian_matrix(rng, 30, 7);
    const RankMetrics a = rank_metrics(h);
    const RankMetrics b = rank_metrics(h * 13.5);
    EXPECT_GE(a.effective_rank, 1.0);
    EXPECT_LE(a.effective_rank, 7.0);
    EXPECT_GE(a.stable_rank, 1.0);
    EXPECT_LE(a.stable_rank, 7.0);
    EXPECT_NEAR(a.effective_rank, b.effective_rank, 1e-10);
  }
}

TEST(Rank, SubsampleKeepsCapRowsDeterministically) {
  Rng rng(7);
  const Matrix h = gaussian_matrix(rng, 1000, 4);
  const Matrix a = subsample(h, 512, 3);
  EXPECT_EQ(a.rows(), 512);
  EXPECT_EQ(a, subsample(h, 512, 3));
  EXPECT_EQ(subsample(h.topRows(100), 512, 3), h.topRows(100));
}

TEST(Invariance, DuplicateIgnoresColumnScaling) {
  Rng rng(8);
  Matrix h = gaussian_matrix(rng, 40, 6);
  h.col(4) = h.col(1) * 1.01 + gaussian_matrix(rng, 40, 1) * 0.01;
  const auto a = duplicate_fraction(h);
  Matrix s = h;
  for (int j = 0; j < 6; ++j) s.col(j) *= 0.3 + j;
  EXPECT_EQ(duplicate_fraction(s).fraction, a.fraction);
  EXPECT_GT(a.fraction, 0.0);
}

TEST(Invariance, RowPermutationKeepsClassification) {
  Rng rng(9);
  Matrix h = gaussian_matrix(rng, 40, 6).cwiseMax(0.0);
  h.col(2).setZero();
  h.col(5) = h.col(0);
  Eigen::PermutationMatrix<Eigen::Dynamic> p(40);
  p.setIdentity();
  std::shuffle(p.indices().data(), p.indices().data() + 40, rng);
  const Matrix q = p * h;
  EXPECT_EQ(dead_units(q), dead_units(h));
  EXPECT_EQ(duplicate_fraction(q).pairs, duplicate_fraction(h).pairs);
}

TEST(R2, ExactCloneAndSingletons) {
  Rng rng(10);
  const Matrix base = gaussian_matrix(rng, 16, 3);
  const Partition blocks = Partition::cloned(3, 2);
  Matrix clone(16, 6);
  for (const auto& b : blocks.blocks)
    for (int u : b) clone.col(u) = base.col(&b - blocks.blocks.data());
  EXPECT_EQ(cloning_r2(clone, blocks).r2, 1.0);
  EXPECT_EQ(cloning_r2(base, Partition::singletons(3)).r2, 1.0);
}

TEST(R2, IndependentGaussianPairsExplainHalf) {
  Rng rng(11);
  const Matrix h = gaussian_matrix(rng, 10000, 8);
  EXPECT_NEAR(cloning_r2(h, Partition::cloned(4, 2)).r2, 0.5, 0.05);
}

TEST(R2, ZeroVarianceIsFlagged) {
  const R2Result r = cloning_r2(Matrix::Constant(4, 4, 2.0), Partition::cloned(2, 2));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.r2, 1.0);
}

TEST(Report, FractionsInRangeAndJsonKeys) {
  Network net = make_mlp(4, {8, 6}, 2, ActivationFn::Relu, 12);
  Rng rng(12);
  const Matrix x = gaussian_matrix(rng, 64, 4);
  const auto r = loss_and_gradients(net, x, gaussian_matrix(rng, 64, 2), LossKind::Mse, Mode::Eval);
  MetricsReport rep = compute_metrics(net, r.acts);
  rep.step = 5;
  ASSERT_EQ(rep.layers.size(), 2u);
  for (const auto& l : rep.layers) {
    for (double f : {l.dead_frac, l.dup_frac, l.sat_frac}) {
      EXPECT_GE(f, 0.0);
      EXPECT_LE(f, 1.0);
    }
    EXPECT_GE(l.eff_rank, 1.0);
    EXPECT_LE(l.eff_rank, l.width);
  }
  const Json j = report_to_json(rep);
  EXPECT_EQ(j.at("step"), 5);
  EXPECT_TRUE(j.contains(rep.layers[1].name + ".eff_rank"));
  EXPECT_FALSE(j.contains("r2_forward"));
}

}  // namespace
}  // namespace lop
