// Clone a small MLP, train base and clone side by side, and watch the clone
// stay on its manifold under SGD but leave it under parameter noise.

#include <cstdio>

#include "lop/lop.hpp"

using namespace lop;

namespace {

void run(const char* label, OptimizerConfig oc) {
  const Network base = make_mlp(8, {4}, 1, ActivationFn::Relu, 11);
  const ClonedNetwork c = clone_network(base, 2);
  const Network teacher = make_mlp(8, {32}, 1, ActivationFn::Tanh, 12);
  TaskStream stream = [&](long t) {
    Rng rng(derive_seed(13, static_cast<std::uint64_t>(t)));
    Matrix x = gaussian_matrix(rng, 32, 8);
    Matrix y = forward(teacher, x, Mode::Eval).output();
    return std::make_pair(x, y);
  };
  Rng prng(14);
  const Matrix px = gaussian_matrix(prng, 256, 8);
  const Matrix py = forward(teacher, px, Mode::Eval).output();
  ConfinementOptions o;
  o.steps = 2000;
  o.cadence = 250;
  std::printf("%s\n  %6s %12s %12s %12s\n", label, "step", "r2_forward", "r2_backward", "bc");
  confinement_run(base, c.net, c.profile, oc, stream, px, py, o, [](const ConfinementRow& r) {
    std::printf("  %6ld %12.8f %12.8f %12.3g\n", r.step, r.r2_forward, r.r2_backward, r.residual.bc);
  });
}

}  // namespace

int main() {
  OptimizerConfig sgd;
  sgd.lr = 0.2;
  run("sgd", sgd);
  OptimizerConfig noisy = sgd;
  noisy.kind = OptimizerKind::NoisySgd;
  noisy.sigma0 = 0.01;
  noisy.noise_decay = 0.999;
  run("noisy sgd", noisy);
}
