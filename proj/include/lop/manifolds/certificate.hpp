#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/manifolds/cloning.hpp"

namespace lop {

struct CertificateCheck {
  bool pass = true;
  double deviation = 0.0;  // largest intra-block spread seen
};

/// MC1: blockwise-equal inputs give blockwise-equal outputs.
/// MC2: blockwise-equal output adjoints give blockwise-equal input adjoints.
/// MC3: parameter gradients are constant on every block pair.
struct CertificateReport {
  std::string module;
  CertificateCheck mc1;
  CertificateCheck mc2;
  CertificateCheck mc3;

  bool pass() const { return mc1.pass && mc2.pass && mc3.pass; }
};

struct CertifyOptions {
  Mode mode = Mode::Train;  // train mode exercises dropout masks and batch statistics
  int probes = 4;
  int batch = 16;
  double tol = 1e-12;
  std::uint64_t seed = 0;
};

/// Largest spread max - min over each block, row by row.
inline double block_spread(const Matrix& values, const Partition& p) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (const Block& b : p.blocks) {
      double lo = values(i, b[0]), hi = lo;
      for (int u : b) {
        lo = std::min(lo, values(i, u));
        hi = std::max(hi, values(i, u));
      }
      worst = std::max(worst, hi - lo);
    }
  return worst;
}

inline double pair_spread(const Matrix& w, const std::vector<BlockPair>& pairs) {
  double worst = 0.0;
  for (const BlockPair& bp : pairs) worst = std::max(worst, block_deviation(w, bp).bc);
  return worst;
}

namespace detail {

inline void record(CertificateCheck& c, double dev, double tol) {
  c.deviation = std::max(c.deviation, dev);
  if (!(dev < tol)) c.pass = false;
}

}  // namespace detail

/// Runs the three certificates on one module of a cloned network, given the
/// interfaces it reads (`inputs`, two for residual-add) and writes. Failures
/// are reported, never thrown.
inline CertificateReport certify_module(const Module& m, const std::vector<InterfaceProfile>& inputs,
                                        const InterfaceProfile& output, const CertifyOptions& opt = {}) {
  if (inputs.size() != m.inputs.size()) throw ValidationError("interface count does not match module inputs", m.name);
  CertificateReport rep;
  rep.module = m.name;
  Rng rng(opt.seed);
  for (int probe = 0; probe < opt.probes; ++probe) {
    const Matrix x = expand_units(gaussian_matrix(rng, opt.batch, inputs[0].base_shape.size()), inputs[0]);
    Matrix x2;
    if (inputs.size() > 1) x2 = expand_units(gaussian_matrix(rng, opt.batch, inputs[1].base_shape.size()), inputs[1]);
    ModuleCache<double> cache;
    Rng mask_rng(derive_seed(opt.seed, static_cast<std::uint64_t>(probe)));
    const Matrix y = module_forward(m, x, inputs.size() > 1 ? &x2 : nullptr, opt.mode, mask_rng, cache);
    detail::record(rep.mc1, block_spread(y, output.units), opt.tol);

    const Matrix dy = expand_units(gaussian_matrix(rng, opt.batch, output.base_shape.size()), output);
    Matrix dx, dx2;
    std::vector<Matrix> grads;
    module_backward(m, x, y, dy, opt.mode, cache, dx, inputs.size() > 1 ? &dx2 : nullptr, grads);
    detail::record(rep.mc2, block_spread(dx, inputs[0].units), opt.tol);
    if (inputs.size() > 1) detail::record(rep.mc2, block_spread(dx2, inputs[1].units), opt.tol);

    for (std::size_t p = 0; p < grads.size(); ++p)
      detail::record(rep.mc3, pair_spread(grads[p], block_pairs(m, inputs[0], output, static_cast<int>(p))), opt.tol);
  }
  return rep;
}

/// Certificates for every module of a cloned network.
inline std::vector<CertificateReport> certify_network(const Network& net, const CloningProfile& profile,
                                                      const CertifyOptions& opt = {}) {
  std::vector<CertificateReport> out;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    std::vector<InterfaceProfile> ins;
    for (int s : m.inputs) ins.push_back(profile.slot(s));
    CertifyOptions o = opt;
    o.seed = derive_seed(opt.seed, i);
    out.push_back(certify_module(m, ins, profile.slot(static_cast<int>(i) + 1), o));
  }
  return out;
}

inline Json certificate_to_json(const CertificateReport& r) {
  auto check = [](const CertificateCheck& c) { return Json{{"pass", c.pass}, {"deviation", c.deviation}}; };
  return Json{{"module", r.module}, {"mc1", check(r.mc1)}, {"mc2", check(r.mc2)}, {"mc3", check(r.mc3)}};
}

/// Whole-network cloning on one batch: intra-block spreads of every slot's
/// values, adjoints and parameter gradients, and, when a base network is
/// given, the largest gap between a clone unit and its base unit.
struct CloningCheck {
  double forward_spread = 0.0;
  double backward_spread = 0.0;
  double gradient_spread = 0.0;
  double base_deviation = 0.0;
};

inline CloningCheck cloning_check(const Network& clone, const CloningProfile& profile, const Matrix& x_base, Mode mode,
                                  std::uint64_t seed = 0, const Network* base = nullptr) {
  CloningCheck c;
  auto acts = forward(clone, expand_input(x_base, profile), mode, seed);
  Rng rng(seed);
  const InterfaceProfile& out = profile.slot(clone.output_slot());
  const Matrix dy = expand_units(gaussian_matrix(rng, x_base.rows(), out.base_shape.size()), out);
  const Gradients grads = backward(clone, acts, dy);
  for (int s = 0; s < clone.num_slots(); ++s) {
    const auto k = static_cast<std::size_t>(s);
    c.forward_spread = std::max(c.forward_spread, block_spread(acts.post[k], profile.slot(s).units));
    c.backward_spread = std::max(c.backward_spread, block_spread(acts.adjoint[k], profile.slot(s).units));
  }
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (std::size_t p = 0; p < grads[i].size(); ++p)
      c.gradient_spread = std::max(c.gradient_spread, pair_spread(grads[i][p], block_pairs(profile, i, static_cast<int>(p))));
  if (base != nullptr) {
    const auto b = forward(*base, x_base, mode, seed);
    for (int s = 0; s < clone.num_slots(); ++s) {
      const auto k = static_cast<std::size_t>(s);
      const Matrix expanded = expand_units(b.post[k], profile.slot(s));
      c.base_deviation = std::max(c.base_deviation, (expanded - acts.post[k]).cwiseAbs().maxCoeff());
    }
  }
  return c;
}

}  // namespace lop
