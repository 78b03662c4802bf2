#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "lop/core/builder.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/manifolds/confinement.hpp"
#include "lop/optim/cbp.hpp"
#include "lop/optim/optimizer.hpp"

namespace lop {
namespace {

// 1 -> 1 linear network with weight w and bias b.
Network scalar_net(double w, double b = 0.0) {
  NetworkBuilder nb(Shape{1, 1, 1}, 0);
  nb.linear(1);
  Network net = std::move(nb).build();
  net.module(0).params[0](0, 0) = w;
  net.module(0).params[1](0, 0) = b;
  return net;
}

Gradients scalar_grads(double gw, double gb = 0.0) { return Gradients{{Matrix::Constant(1, 1, gw), Matrix::Constant(1, 1, gb)}}; }

OptimizerConfig config(OptimizerKind kind, double lr) {
  OptimizerConfig c;
  c.kind = kind;
  c.lr = lr;
  return c;
}

TEST(Optimizer, SgdStep) {
  Network net = scalar_net(1.0);
  Optimizer opt(config(OptimizerKind::Sgd, 0.1), net);
  opt.step(net, scalar_grads(2.0));
  EXPECT_DOUBLE_EQ(net.module(0).params[0](0, 0), 0.8);
}

TEST(Optimizer, MomentumAccumulatesRawGradients) {
  Network net = scalar_net(1.0);
  Optimizer opt(config(OptimizerKind::Momentum, 0.1), net);
  opt.step(net, scalar_grads(2.0));
  EXPECT_DOUBLE_EQ(net.module(0).params[0](0, 0), 0.8);
  opt.step(net, scalar_grads(2.0));
  EXPECT_NEAR(net.module(0).params[0](0, 0), 0.8 - 0.1 * 3.8, 1e-15);
}

TEST(Optimizer, AdamFirstStepIsLrTimesSign) {
  Network net = scalar_net(1.0);
  Optimizer opt(config(OptimizerKind::Adam, 0.1), net);
  opt.step(net, scalar_grads(2.0, -3.0));
  EXPECT_NEAR(net.module(0).params[0](0, 0), 0.9, 1e-8);
  EXPECT_NEAR(net.module(0).params[1](0, 0), 0.1, 1e-8);
  EXPECT_NEAR(opt.first()[0][0](0, 0), 0.2, 1e-15);
  EXPECT_NEAR(opt.second()[0][0](0, 0), 0.004, 1e-15);
}

TEST(Optimizer, RmsPropStep) {
  Network net = scalar_net(1.0);
  Optimizer opt(config(OptimizerKind::RmsProp, 0.1), net);
  opt.step(net, scalar_grads(2.0));
  const double v = 0.01 * 4.0;
  EXPECT_NEAR(net.module(0).params[0](0, 0), 1.0 - 0.1 * 2.0 / (std::sqrt(v) + 1e-8), 1e-15);
}

TEST(Optimizer, DecoupledWeightDecayFollowsGradientStep) {
  Network net = scalar_net(1.0);
  OptimizerConfig c = config(OptimizerKind::Sgd, 0.1);
  c.weight_decay = 0.5;
  Optimizer opt(c, net);
  opt.step(net, scalar_grads(2.0));
  EXPECT_DOUBLE_EQ(net.module(0).params[0](0, 0), 0.8 - 0.1 * 0.5 * 0.8);
}

TEST(Optimizer, StepCounterIncrementsByOne) {
  Network net = scalar_net(1.0);
  Optimizer opt(config(OptimizerKind::Adam, 0.01), net);
  for (long t = 1; t <= 7; ++t) {
    opt.step(net, scalar_grads(0.3));
    EXPECT_EQ(opt.steps(), t);
  }
}

TEST(Optimizer, NoiseScheduleDecaysGeometrically) {
  Network net = scalar_net(1.0);
  OptimizerConfig c = config(OptimizerKind::NoisySgd, 0.0);
  c.sigma0 = 0.01;
  c.noise_decay = 0.999;
  Optimizer opt(c, net);
  EXPECT_DOUBLE_EQ(opt.sigma(), 0.01);
  for (int t = 0; t < 100; ++t) opt.step(net, scalar_grads(1.0));
  EXPECT_NEAR(opt.sigma(), 0.009048, 5e-7);
  EXPECT_NEAR(opt.sigma(), 0.01 * std::pow(0.999, 100), 1e-17);
}

TEST(Optimizer, ZeroNoiseIsBitExactSgd) {
  Network a = make_mlp(3, {5}, 2, ActivationFn::Tanh, 4);
  Network b = a;
  OptimizerConfig noisy = config(OptimizerKind::NoisySgd, 0.05);
  noisy.sigma0 = 0.0;
  Optimizer oa(noisy, a);
  Optimizer ob(config(OptimizerKind::Sgd, 0.05), b);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = gaussian_matrix(rng, 8, 3);
    const Matrix y = gaussian_matrix(rng, 8, 2);
    oa.step(a, loss_and_gradients(a, x, y, LossKind::Mse, Mode::Eval).grads);
    ob.step(b, loss_and_gradients(b, x, y, LossKind::Mse, Mode::Eval).grads);
  }
  EXPECT_EQ(a.flat_parameters(), b.flat_parameters());
}

// E|eps|^2 = sigma_t^2 |g|^2 P; each draw is recovered from the update.
TEST(Optimizer, NoiseEnergyMatchesSchedule) {
  Network net = make_mlp(3, {4}, 2, ActivationFn::Relu, 2);
  OptimizerConfig c = config(OptimizerKind::NoisySgd, 1.0);
  c.sigma0 = 0.01;
  c.noise_decay = 0.9999;
  c.seed = 17;
  Optimizer opt(c, net);
  Gradients g;
  for (const auto& m : net.modules()) {
    g.emplace_back();
    for (const auto& p : m.params) g.back().push_back(Matrix::Constant(p.rows(), p.cols(), 0.5));
  }
  const double p_count = static_cast<double>(net.num_parameters());
  const double g2 = 0.25 * p_count;
  double ratio = 0.0;
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const double sigma = opt.sigma();
    const auto before = net.flat_parameters();
    opt.step(net, g);
    const auto after = net.flat_parameters();
    double e2 = 0.0;
    for (std::size_t k = 0; k < before.size(); ++k) {
      const double eps = (before[k] - after[k]) - 0.5;
      e2 += eps * eps;
    }
    ratio += e2 / (sigma * sigma * g2 * p_count);
  }
  EXPECT_NEAR(ratio / draws, 1.0, 0.05);
}

TEST(Optimizer, NonFiniteGradientNamesTheParameter) {
  Network net = make_mlp(2, {3}, 1, ActivationFn::Relu, 0);
  Optimizer opt(config(OptimizerKind::Sgd, 0.1), net);
  auto r = loss_and_gradients(net, Matrix(Matrix::Ones(2, 2)), Matrix(Matrix::Zero(2, 1)), LossKind::Mse, Mode::Eval);
  r.grads[2][1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    opt.step(net, r.grads);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(net.parameter_name(2, 1)), std::string::npos) << e.what();
  }
}

TEST(Optimizer, JsonRoundTripAndValidation) {
  OptimizerConfig c = config(OptimizerKind::NoisySgd, 0.2);
  c.sigma0 = 0.03;
  c.noise_decay = 0.99;
  const OptimizerConfig d = optimizer_from_json(optimizer_to_json(c));
  EXPECT_EQ(d.kind, OptimizerKind::NoisySgd);
  EXPECT_EQ(d.sigma0, 0.03);
  EXPECT_EQ(d.noise_decay, 0.99);
  try {
    optimizer_from_json(Json{{"lambda", 1.5}}, "config.optimizer");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.where(), "config.optimizer.lambda");
  }
  EXPECT_THROW(optimizer_from_json(Json{{"kind", "lbfgs"}}), ValidationError);
}

ClonedNetwork cloned_mlp() { return clone_network(make_mlp(3, {4, 5}, 2, ActivationFn::Tanh, 9), 2); }

bool groups_constant(const Matrix& m, const std::vector<Block>& groups) {
  for (const Block& g : groups)
    for (int e : g)
      if (m.data()[e] != m.data()[g[0]]) return false;
  return true;
}

TEST(OptimizerTie, FreshBuffersAreUnchanged) {
  ClonedNetwork c = cloned_mlp();
  Optimizer opt(config(OptimizerKind::Adam, 0.01), c.net);
  opt.tie(c.profile);
  for (const auto& mb : opt.first())
    for (const auto& b : mb) EXPECT_EQ(b.squaredNorm(), 0.0);
}

TEST(OptimizerTie, PerturbedBuffersGetBlockMeans) {
  ClonedNetwork c = cloned_mlp();
  Optimizer opt(config(OptimizerKind::Adam, 0.01), c.net);
  Rng rng(3);
  double total = 0.0;
  for (auto& mb : opt.first())
    for (auto& b : mb) {
      b = gaussian_matrix(rng, b.rows(), b.cols());
      total += b.sum();
    }
  opt.tie(c.profile);
  double after = 0.0;
  for (std::size_t i = 0; i < opt.first().size(); ++i)
    for (std::size_t p = 0; p < opt.first()[i].size(); ++p) {
      const Matrix& b = opt.first()[i][p];
      EXPECT_TRUE(groups_constant(b, parameter_groups(c.profile, i, static_cast<int>(p), b.cols())));
      after += b.sum();
    }
  EXPECT_NEAR(after, total, 1e-12);
}

TEST(OptimizerTie, MismatchedProfileIsRejected) {
  ClonedNetwork c = cloned_mlp();
  ClonedNetwork other = clone_network(make_mlp(3, {4}, 2, ActivationFn::Tanh, 9), 2);
  Optimizer opt(config(OptimizerKind::Adam, 0.01), c.net);
  EXPECT_THROW(opt.tie(other.profile), ValidationError);
}

// Block-constant (parameter, gradient, buffer) triples stay block-constant
// bit for bit under every symmetric update rule.
TEST(OptimizerTie, BlockConstantTriplesStayExact) {
  for (OptimizerKind kind : {OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::RmsProp, OptimizerKind::Adam}) {
    ClonedNetwork c = cloned_mlp();
    Optimizer opt(config(kind, 0.05), c.net);
    opt.tie(c.profile);
    Rng rng(11);
    for (int t = 0; t < 5; ++t) {
      Gradients g;
      for (std::size_t i = 0; i < c.net.modules().size(); ++i) {
        g.emplace_back();
        for (std::size_t p = 0; p < c.net.modules()[i].params.size(); ++p) {
          const Matrix& th = c.net.modules()[i].params[p];
          Matrix gm(th.rows(), th.cols());
          for (const Block& b : parameter_groups(c.profile, i, static_cast<int>(p), th.cols())) {
            const double v = gaussian(rng);
            for (int e : b) gm.data()[e] = v;
          }
          g.back().push_back(gm);
        }
      }
      opt.step(c.net, g);
    }
    for (std::size_t i = 0; i < c.net.modules().size(); ++i)
      for (std::size_t p = 0; p < c.net.modules()[i].params.size(); ++p) {
        const Matrix& th = c.net.modules()[i].params[p];
        const auto groups = parameter_groups(c.profile, i, static_cast<int>(p), th.cols());
        EXPECT_TRUE(groups_constant(th, groups)) << to_string(kind);
        EXPECT_TRUE(groups_constant(opt.first()[i][p], groups)) << to_string(kind);
        EXPECT_TRUE(groups_constant(opt.second()[i][p], groups)) << to_string(kind);
      }
  }
}

TEST(OptimizerTie, TiedAdamStaysBlockConstantFor500Steps) {
  Network base = make_mlp(4, {6, 6}, 2, ActivationFn::Tanh, 5);
  ClonedNetwork c = clone_network(base, 2);
  OptimizerConfig cfg = config(OptimizerKind::Adam, 1e-3);
  cfg.tie_clones = true;
  Rng rng(8);
  const Matrix px = gaussian_matrix(rng, 32, 4);
  const Matrix py = gaussian_matrix(rng, 32, 2);
  TaskStream stream = [](long t) {
    Rng r(derive_seed(99, static_cast<std::uint64_t>(t)));
    return std::make_pair(gaussian_matrix(r, 16, 4), gaussian_matrix(r, 16, 2));
  };
  ConfinementOptions o;
  o.steps = 500;
  o.cadence = 50;
  const auto res = confinement_run(base, c.net, c.profile, cfg, stream, px, py, o);
  for (const auto& row : res.rows) EXPECT_LT(row.residual.bc, 1e-9) << row.step;
}

// Linear(2 -> n) -> relu -> Linear(n -> 1).
Network cbp_net(int n, std::uint64_t seed = 1) { return make_mlp(2, {n}, 1, ActivationFn::Relu, seed); }

TEST(Cbp, FindsLinearActivationLinearLayers) {
  const CbpState st = cbp_init(make_mlp(3, {4, 5}, 2, ActivationFn::Relu, 0), {});
  ASSERT_EQ(st.layers.size(), 2u);
  EXPECT_EQ(st.layers[0].in_module, 0u);
  EXPECT_EQ(st.layers[0].act_module, 1u);
  EXPECT_EQ(st.layers[0].out_module, 2u);
  EXPECT_EQ(st.layers[1].utility.size(), 5);
  NetworkBuilder b(Shape{3, 1, 1}, 0);
  b.linear(2);
  EXPECT_THROW(cbp_init(std::move(b).build(), {}), ValidationError);
}

TEST(Cbp, ContributionUtilityOfOneUnit) {
  Network net = cbp_net(1);
  net.module(2).params[0](0, 0) = -0.5;
  const CbpState st = cbp_init(net, {});
  const Vector u = instant_utility(net, st.layers[0], Matrix::Constant(1, 1, 2.0), UtilityKind::Contribution, Vector::Zero(1));
  EXPECT_EQ(u(0), 1.0);
}

TEST(Cbp, BiasCorrectionRecoversConstantUtility) {
  Network net = cbp_net(3);
  CbpConfig cfg;
  cfg.maturity = 1000;
  CbpState st = cbp_init(net, cfg);
  const Matrix x = Matrix::Constant(4, 2, 0.7);
  const auto acts = forward(net, x, Mode::Eval);
  const Vector u = instant_utility(net, st.layers[0], acts.post[2], UtilityKind::Contribution, Vector::Zero(3));
  cbp_step(st, net, acts);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(corrected(st.layers[0].utility(i), 1, cfg.rho), u(i));
  for (int t = 2; t <= 300; ++t) {
    cbp_step(st, net, acts);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(corrected(st.layers[0].utility(i), t, cfg.rho), u(i), 1e-12 * (1.0 + u(i)));
  }
}

TEST(Cbp, ReplacingSilentUnitLeavesFunctionUnchanged) {
  Network net = cbp_net(4);
  net.module(2).params[0](0, 1) = 0.0;
  CbpState st = cbp_init(net, {});
  Rng rng(2);
  const Matrix x = gaussian_matrix(rng, 16, 2);
  const Matrix before = forward(net, x, Mode::Eval).output();
  const Matrix w_in = net.module(0).params[0];
  reinitialize_unit(st, st.layers[0], net, 1, nullptr);
  EXPECT_NE(net.module(0).params[0].row(1), w_in.row(1));
  EXPECT_LT((forward(net, x, Mode::Eval).output() - before).cwiseAbs().maxCoeff(), 1e-12);
}

// A unit with zero incoming weights outputs its bias on every sample, so the
// moved mean reproduces its contribution exactly.
TEST(Cbp, BiasTransferPreservesConstantUnit) {
  Network net = cbp_net(4);
  net.module(0).params[0].row(2).setZero();
  net.module(0).params[1](2, 0) = 0.8;
  CbpConfig cfg;
  cfg.maturity = 1000;
  CbpState st = cbp_init(net, cfg);
  Rng rng(6);
  const Matrix x = gaussian_matrix(rng, 16, 2);
  const Matrix before = forward(net, x, Mode::Eval).output();
  for (int t = 0; t < 10; ++t) cbp_step(st, net, forward(net, gaussian_matrix(rng, 8, 2), Mode::Eval));
  reinitialize_unit(st, st.layers[0], net, 2, nullptr);
  EXPECT_EQ(net.module(2).params[0](0, 2), 0.0);
  EXPECT_LT((forward(net, x, Mode::Eval).output() - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cbp, ReplacesOnlyMatureUnitsWithinBudget) {
  Network net = cbp_net(10, 4);
  CbpConfig cfg;
  cfg.maturity = 5;
  cfg.replace_rate = 0.25;
  CbpState st = cbp_init(net, cfg);
  Optimizer opt(config(OptimizerKind::Adam, 0.01), net);
  Rng rng(5);
  long total = 0;
  for (int t = 0; t < 200; ++t) {
    const Matrix x = gaussian_matrix(rng, 8, 2);
    auto r = loss_and_gradients(net, x, Matrix(x.rowwise().sum()), LossKind::Mse, Mode::Eval);
    opt.step(net, r.grads);
    const auto ages = st.layers[0].age;
    const auto log = cbp_step(st, net, r.acts, &opt);
    EXPECT_LE(log.size(), 3u);
    for (const auto& rep : log) {
      EXPECT_GT(rep.age, cfg.maturity);
      EXPECT_EQ(rep.age, ages[static_cast<std::size_t>(rep.neuron)] + 1);
      EXPECT_EQ(st.layers[0].age[static_cast<std::size_t>(rep.neuron)], 0);
      EXPECT_EQ(rep.layer, net.modules()[1].name);
      EXPECT_EQ(opt.first()[2][0](0, rep.neuron), 0.0);
    }
    total += static_cast<long>(log.size());
  }
  EXPECT_GT(total, 0);
  for (double u : std::vector<double>(st.layers[0].utility.data(), st.layers[0].utility.data() + 10)) EXPECT_GE(u, 0.0);
}

TEST(Cbp, LowestUtilityUnitGoesFirst) {
  Network net = cbp_net(5, 2);
  net.module(2).params[0](0, 3) = 0.0;
  CbpConfig cfg;
  cfg.maturity = 2;
  cfg.replace_rate = 1.0 / 5.0;
  CbpState st = cbp_init(net, cfg);
  Rng rng(1);
  std::vector<Replacement> log;
  for (int t = 0; t < 3 && log.empty(); ++t) log = cbp_step(st, net, forward(net, gaussian_matrix(rng, 8, 2), Mode::Eval));
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].neuron, 3);
  EXPECT_EQ(log[0].utility, 0.0);
}

TEST(Cbp, ReplacementRateAccumulatesAcrossSteps) {
  Network net = cbp_net(10, 3);
  CbpConfig cfg;
  cfg.maturity = 0;
  cfg.replace_rate = 0.01;
  CbpState st = cbp_init(net, cfg);
  Rng rng(4);
  long total = 0;
  for (int t = 0; t < 1000; ++t) total += static_cast<long>(cbp_step(st, net, forward(net, gaussian_matrix(rng, 4, 2), Mode::Eval)).size());
  // 10 mature units at rate 0.01 owe 0.1 replacements per step.
  EXPECT_GE(total, 99);
  EXPECT_LE(total, 100);
}

TEST(Cbp, ConfigFromJson) {
  const CbpConfig c = cbp_from_json(Json{{"rho", 0.9}, {"tau_maturity", 50}, {"r_replace", 1e-3}, {"utility", "adaptable"}});
  EXPECT_EQ(c.rho, 0.9);
  EXPECT_EQ(c.maturity, 50);
  EXPECT_EQ(c.utility, UtilityKind::Adaptable);
  try {
    cbp_from_json(Json{{"rho", 1.0}}, "config.optimizer");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.where(), "config.optimizer.rho");
  }
}

TEST(Cbp, AdaptableUtilityUsesCenteredActivation) {
  Network net = cbp_net(1);
  net.module(0).params[0].setConstant(0.5);
  net.module(2).params[0](0, 0) = 2.0;
  const CbpState st = cbp_init(net, {});
  const Matrix h{{1.0}, {3.0}};
  const Vector u = instant_utility(net, st.layers[0], h, UtilityKind::Adaptable, Vector::Constant(1, 2.0));
  EXPECT_DOUBLE_EQ(u(0), 1.0 * 2.0 / 1.0);
}

}  // namespace
}  // namespace lop
