// Fit the correlation kernel of a few activations and show how one layer
// spreads the spectrum of a strongly correlated input.

#include <cstdio>

#include "lop/lop.hpp"

using namespace lop;

int main() {
  Rng rng(5);
  const Matrix c = random_correlation_matrix(rng, 8, 2);  // rank 2, so er_2 <= 2
  std::printf("input effective rank %.4f\n\n", effective_ranks(c).renyi2);
  std::printf("%-6s %5s %5s %9s %9s %9s %11s\n", "fn", "a", "b", "kappa", "r_star", "frozen", "rank gain");
  for (ActivationFn fn : {ActivationFn::Relu, ActivationFn::Tanh, ActivationFn::Gelu})
    for (double a : {0.5, 2.0})
      for (double b : {-1.0, 0.0}) {
        const ScalarActivation act{fn, a, b, 0.25};
        const CorrelationKernel k = make_kernel(act);
        const Decorrelation d = decorrelation_strength(k);
        std::printf("%-6s %5.1f %5.1f %9.4f %9.4f %9.4f %11.4f\n", to_string(fn).c_str(), a, b, d.kappa, d.r_star,
                    frozen_proxy(act), rank_gain_ratio(c, k).closed_form);
      }
}
