#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/core/serialize.hpp"
#include "lop/manifolds/partition.hpp"

namespace lop {

/// One interface (slot) of a cloned network. Unit block f holds the clones
/// of base unit f; channel block c holds the clones of base channel c.
struct InterfaceProfile {
  Shape base_shape;
  Shape clone_shape;
  int factor = 1;
  Partition units;
  Partition channels;
};

/// Maps every slot of a cloned network onto the slots of its base (quotient)
/// network. Interfaces are per slot, so the output partition of one module is
/// by construction the input partition of every module that reads the slot.
struct CloningProfile {
  Network base;
  std::vector<int> factors;  // per base slot
  std::vector<InterfaceProfile> interfaces;

  const InterfaceProfile& slot(int s) const { return interfaces.at(static_cast<std::size_t>(s)); }
};

/// Row and column index sets of one block pair inside a parameter matrix.
struct BlockPair {
  Block rows;
  Block cols;
};

namespace detail {

inline bool factor_preserving(ModuleKind k) { return k != ModuleKind::Linear && k != ModuleKind::Conv2d; }

inline InterfaceProfile make_interface(const Shape& base, int factor) {
  InterfaceProfile p;
  p.base_shape = base;
  p.factor = factor;
  p.clone_shape = Shape{base.channels * factor, base.height, base.width};
  p.units = Partition::cloned(base.channels, factor, base.spatial());
  p.channels = Partition::cloned(base.channels, factor);
  return p;
}

}  // namespace detail

/// Throws ValidationError naming the first module whose interfaces disagree.
/// Modules other than linear and conv2d keep the factor of their inputs, and
/// a softmax output is never cloned (the clone would no longer output
/// probabilities of the base classes).
inline void check_factors(const Network& base, const std::vector<int>& factors) {
  if (static_cast<int>(factors.size()) != base.num_slots()) {
    throw ValidationError("expected " + std::to_string(base.num_slots()) + " interface factors, got " +
                              std::to_string(factors.size()),
                          "expand");
  }
  for (std::size_t s = 0; s < factors.size(); ++s)
    if (factors[s] < 1) throw ValidationError("factor must be at least 1", "expand[" + std::to_string(s) + "]");
  for (std::size_t i = 0; i < base.modules().size(); ++i) {
    const auto& m = base.modules()[i];
    const int out = factors[i + 1];
    if (detail::factor_preserving(m.kind)) {
      for (int s : m.inputs)
        if (factors[static_cast<std::size_t>(s)] != out) throw ValidationError("inconsistent interface factors", m.name);
    }
    if (m.kind == ModuleKind::SoftmaxOutput && out != 1) throw ValidationError("softmax output cannot be cloned", m.name);
  }
}

/// Factor `alpha` on every hidden interface: input and output stay at 1, and
/// so does every slot that reaches the output through factor-preserving
/// modules only.
inline std::vector<int> default_factors(const Network& base, int alpha = 2) {
  if (alpha < 1) throw ValidationError("expansion factor must be at least 1", "expand");
  std::vector<int> f(static_cast<std::size_t>(base.num_slots()), 1);
  for (std::size_t i = 0; i < base.modules().size(); ++i) {
    const auto& m = base.modules()[i];
    f[i + 1] = detail::factor_preserving(m.kind) ? f[static_cast<std::size_t>(m.inputs[0])] : alpha;
  }
  f.back() = 1;
  for (std::size_t i = base.modules().size(); i-- > 0;) {
    const auto& m = base.modules()[i];
    if (detail::factor_preserving(m.kind) && f[i + 1] == 1)
      for (int s : m.inputs) f[static_cast<std::size_t>(s)] = 1;
  }
  check_factors(base, f);
  return f;
}

inline CloningProfile make_profile(const Network& base, const std::vector<int>& factors) {
  check_factors(base, factors);
  CloningProfile p;
  p.base = base;
  p.factors = factors;
  for (int s = 0; s < base.num_slots(); ++s)
    p.interfaces.push_back(detail::make_interface(base.slot_shape(s), factors[static_cast<std::size_t>(s)]));
  return p;
}

/// Block pairs of parameter `param` of module `i`, listed in the row-major
/// order of the corresponding base parameter entries: pair k is the set of
/// clone entries that descend from base entry k. Weights pair an output block
/// with an input block (conv: per kernel offset, over channel blocks); every
/// per-unit vector pairs a unit or channel block with column 0. `param` ==
/// -1 selects the batch-norm buffers.
inline std::vector<BlockPair> block_pairs(const Module& m, const InterfaceProfile& in, const InterfaceProfile& out,
                                          int param) {
  std::vector<BlockPair> pairs;
  auto vector_pairs = [&](const Partition& p) {
    for (const Block& b : p.blocks) pairs.push_back({b, {0}});
  };
  switch (m.kind) {
    case ModuleKind::Linear:
      if (param == 0) {
        for (const Block& r : out.units.blocks)
          for (const Block& c : in.units.blocks) pairs.push_back({r, c});
      } else {
        vector_pairs(out.units);
      }
      break;
    case ModuleKind::Conv2d:
      if (param == 0) {
        const int kk = m.kernel * m.kernel;
        for (const Block& r : out.channels.blocks)
          for (const Block& c : in.channels.blocks)
            for (int o = 0; o < kk; ++o) {
              Block cols;
              for (int ci : c) cols.push_back(ci * kk + o);
              pairs.push_back({r, std::move(cols)});
            }
      } else {
        vector_pairs(out.channels);
      }
      break;
    case ModuleKind::BatchNorm: vector_pairs(out.channels); break;
    case ModuleKind::LayerNorm:
    case ModuleKind::Activation: vector_pairs(out.units); break;
    default: break;
  }
  return pairs;
}

inline std::vector<BlockPair> block_pairs(const CloningProfile& profile, std::size_t i, int param) {
  const auto& m = profile.base.modules().at(i);
  return block_pairs(m, profile.slot(m.inputs[0]), profile.slot(static_cast<int>(i) + 1), param);
}

/// Flat (row-major) index groups of a parameter: entries that must be equal
/// on a block-constant point.
inline std::vector<Block> parameter_groups(const CloningProfile& profile, std::size_t i, int param, Eigen::Index cols) {
  std::vector<Block> groups;
  for (const BlockPair& bp : block_pairs(profile, i, param)) {
    Block g;
    for (int r : bp.rows)
      for (int c : bp.cols) g.push_back(static_cast<int>(r * cols + c));
    groups.push_back(std::move(g));
  }
  return groups;
}

struct ClonedNetwork {
  Network net;
  CloningProfile profile;
};

namespace detail {

inline Network clone_skeleton(const CloningProfile& profile) {
  const Network& base = profile.base;
  Network net(profile.slot(0).clone_shape);
  for (std::size_t i = 0; i < base.modules().size(); ++i) {
    Module m = base.modules()[i];
    m.in_shape = profile.slot(m.inputs[0]).clone_shape;
    m.out_shape = profile.slot(static_cast<int>(i) + 1).clone_shape;
    const InterfaceProfile& in = profile.slot(m.inputs[0]);
    const InterfaceProfile& out = profile.slot(static_cast<int>(i) + 1);
    // Unit and channel counts both scale by the factor; weight columns scale
    // by the input factor.
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      const bool weight = p == 0 && !detail::factor_preserving(m.kind);
      const Matrix& bp = base.modules()[i].params[p];
      m.params[p] = Matrix::Zero(bp.rows() * out.factor, weight ? bp.cols() * in.factor : bp.cols());
    }
    for (auto& b : m.buffers) b = Matrix::Zero(b.rows() * out.factor, 1);
    if (m.kind == ModuleKind::Flatten && out.factor > 1) {
      const auto& bm = base.modules()[i];
      const int n = out.base_shape.size();
      std::vector<int> perm(static_cast<std::size_t>(n * out.factor));
      bool identity = true;
      for (int q = 0; q < n; ++q) {
        const int f = bm.permutation.empty() ? q : bm.permutation[static_cast<std::size_t>(q)];
        for (int j = 0; j < out.factor; ++j) {
          const int src = in.units.blocks[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)];
          perm[static_cast<std::size_t>(q * out.factor + j)] = src;
          identity = identity && src == q * out.factor + j;
        }
      }
      m.permutation = identity ? std::vector<int>{} : perm;
    }
    net.add(std::move(m));
  }
  return net;
}

}  // namespace detail

/// Random perturbation of every weight block pair with at least two rows and
/// two columns that keeps all row and column sums: a double-centered Gaussian
/// block scaled by `amplitude` times the block's largest magnitude. Moves a
/// block-constant point to a generic RE and CE point of the same manifold.
inline void redistribute_within_blocks(Network& net, const CloningProfile& profile, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    auto& m = net.module(i);
    if (m.kind != ModuleKind::Linear && m.kind != ModuleKind::Conv2d) continue;
    Matrix& w = m.params[0];
    for (const BlockPair& bp : block_pairs(profile, i, 0)) {
      const auto p = static_cast<Eigen::Index>(bp.rows.size()), q = static_cast<Eigen::Index>(bp.cols.size());
      if (p < 2 || q < 2) continue;
      Matrix e = gaussian_matrix(rng, p, q);
      const Vector rm = e.rowwise().mean();
      const Eigen::RowVectorXd cm = e.colwise().mean();
      const double mean = e.mean();
      double scale = 0.0;
      for (Eigen::Index r = 0; r < p; ++r)
        for (Eigen::Index c = 0; c < q; ++c) {
          e(r, c) = e(r, c) - rm(r) - cm(c) + mean;
          scale = std::max(scale, std::abs(w(bp.rows[static_cast<std::size_t>(r)], bp.cols[static_cast<std::size_t>(c)])));
        }
      if (scale == 0.0) scale = 1.0;
      for (Eigen::Index r = 0; r < p; ++r)
        for (Eigen::Index c = 0; c < q; ++c)
          w(bp.rows[static_cast<std::size_t>(r)], bp.cols[static_cast<std::size_t>(c)]) += amplitude * scale * e(r, c);
    }
  }
}

struct CloneOptions {
  double redistribute = 0.0;  // > 0: move off block-constant, staying RE and CE
  std::uint64_t seed = 0;
};

/// Expands `base` by the per-slot `factors`. Weight entries are the base
/// entry divided by the input factor, every per-unit vector (bias, gamma,
/// beta, slope, running stats) is duplicated, and flatten reorders features
/// so that the clones of each base feature stay adjacent.
inline ClonedNetwork clone_network(const Network& base, const std::vector<int>& factors, const CloneOptions& opt = {}) {
  ClonedNetwork out;
  out.profile = make_profile(base, factors);
  out.net = detail::clone_skeleton(out.profile);
  for (std::size_t i = 0; i < base.modules().size(); ++i) {
    const auto& bm = base.modules()[i];
    auto& cm = out.net.module(i);
    for (std::size_t p = 0; p < bm.params.size(); ++p) {
      const auto pairs = block_pairs(out.profile, i, static_cast<int>(p));
      const Matrix& bp = bm.params[p];
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        const double v = bp.data()[k] / static_cast<double>(pairs[k].cols.size());
        for (int r : pairs[k].rows)
          for (int c : pairs[k].cols) cm.params[p](r, c) = v;
      }
    }
    if (!bm.buffers.empty()) {
      const auto pairs = block_pairs(out.profile, i, -1);
      for (std::size_t b = 0; b < bm.buffers.size(); ++b)
        for (std::size_t k = 0; k < pairs.size(); ++k)
          for (int r : pairs[k].rows) cm.buffers[b](r, 0) = bm.buffers[b](static_cast<Eigen::Index>(k), 0);
    }
  }
  if (opt.redistribute > 0.0) redistribute_within_blocks(out.net, out.profile, opt.redistribute, opt.seed);
  return out;
}

inline ClonedNetwork clone_network(const Network& base, int alpha = 2, const CloneOptions& opt = {}) {
  return clone_network(base, default_factors(base, alpha), opt);
}

/// Copies each base unit's column to all of its clones.
inline Matrix expand_units(const Matrix& base_values, const InterfaceProfile& iface) {
  if (base_values.cols() != iface.base_shape.size()) throw ValidationError("value width does not match interface", "expand_units");
  Matrix out(base_values.rows(), iface.clone_shape.size());
  for (std::size_t b = 0; b < iface.units.blocks.size(); ++b)
    for (int u : iface.units.blocks[b]) out.col(u) = base_values.col(static_cast<Eigen::Index>(b));
  return out;
}

inline Matrix expand_input(const Matrix& x, const CloningProfile& profile) { return expand_units(x, profile.slot(0)); }

/// Per-block mean of clone values, in base layout.
inline Matrix block_means(const Matrix& values, const Partition& p) {
  Matrix out = Matrix::Zero(values.rows(), static_cast<Eigen::Index>(p.blocks.size()));
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    for (int u : p.blocks[b]) out.col(static_cast<Eigen::Index>(b)) += values.col(u);
    out.col(static_cast<Eigen::Index>(b)) /= static_cast<double>(p.blocks[b].size());
  }
  return out;
}

/// Deviations of one block pair: spread of row sums, of column sums, and of
/// the entries, plus the largest entry magnitude.
struct BlockDeviation {
  double re = 0.0;
  double ce = 0.0;
  double bc = 0.0;
  double scale = 0.0;
};

inline BlockDeviation block_deviation(const Matrix& w, const BlockPair& bp) {
  BlockDeviation d;
  double rmin = INFINITY, rmax = -INFINITY, emin = INFINITY, emax = -INFINITY;
  std::vector<double> colsum(bp.cols.size(), 0.0);
  for (int r : bp.rows) {
    double s = 0.0;
    for (std::size_t c = 0; c < bp.cols.size(); ++c) {
      const double v = w(r, bp.cols[c]);
      s += v;
      colsum[c] += v;
      emin = std::min(emin, v);
      emax = std::max(emax, v);
      d.scale = std::max(d.scale, std::abs(v));
    }
    rmin = std::min(rmin, s);
    rmax = std::max(rmax, s);
  }
  d.re = rmax - rmin;
  d.ce = *std::max_element(colsum.begin(), colsum.end()) - *std::min_element(colsum.begin(), colsum.end());
  d.bc = emax - emin;
  return d;
}

struct ResidualCheck {
  bool pass = true;
  double residual = 0.0;  // largest relative deviation over block pairs
};

struct EquitabilityReport {
  ResidualCheck re;
  ResidualCheck ce;
  ResidualCheck bc;
};

namespace detail {

// Relative deviation against the block's natural scale: row sums against
// scale * columns, column sums against scale * rows, entries against scale.
// A pair passes when the absolute deviation is within tol of that scale or
// below the 1e-12 floor.
inline void accumulate(ResidualCheck& c, double dev, double norm, double tol) {
  const double rel = norm > 0.0 ? dev / norm : 0.0;
  c.residual = std::max(c.residual, rel);
  if (!(dev <= tol * norm + 1e-12)) c.pass = false;
}

}  // namespace detail

inline EquitabilityReport equitability_check(const Matrix& w, const Partition& rows, const Partition& cols, double tol = 1e-9) {
  rows.validate(static_cast<int>(w.rows()), "equitability_check.rows");
  cols.validate(static_cast<int>(w.cols()), "equitability_check.cols");
  EquitabilityReport rep;
  for (const Block& r : rows.blocks)
    for (const Block& c : cols.blocks) {
      const BlockDeviation d = block_deviation(w, {r, c});
      detail::accumulate(rep.re, d.re, d.scale * static_cast<double>(c.size()), tol);
      detail::accumulate(rep.ce, d.ce, d.scale * static_cast<double>(r.size()), tol);
      detail::accumulate(rep.bc, d.bc, d.scale, tol);
    }
  return rep;
}

/// Distance of a cloned network to its cloning manifold. re and ce are
/// measured on the parameters; bc on the displacement from `reference` (the
/// point training started from) when one is given, otherwise on the
/// parameters themselves. Batch-norm running statistics are not trainable and
/// are excluded.
struct ManifoldResidual {
  double re = 0.0;
  double ce = 0.0;
  double bc = 0.0;
  bool re_pass = true;
  bool ce_pass = true;
  bool bc_pass = true;
};

inline ManifoldResidual manifold_residual(const Network& net, const CloningProfile& profile, double tol = 1e-9,
                                          const Network* reference = nullptr) {
  if (net.modules().size() != profile.base.modules().size()) throw ValidationError("network does not match profile", "profile");
  ManifoldResidual res;
  ResidualCheck re, ce, bc;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      const Matrix& w = m.params[p];
      const Matrix disp = reference != nullptr ? Matrix(w - reference->modules()[i].params[p]) : Matrix();
      for (const BlockPair& bp : block_pairs(profile, i, static_cast<int>(p))) {
        const BlockDeviation d = block_deviation(w, bp);
        detail::accumulate(re, d.re, d.scale * static_cast<double>(bp.cols.size()), tol);
        detail::accumulate(ce, d.ce, d.scale * static_cast<double>(bp.rows.size()), tol);
        if (reference != nullptr) {
          const BlockDeviation dd = block_deviation(disp, bp);
          const BlockDeviation d0 = block_deviation(reference->modules()[i].params[p], bp);
          detail::accumulate(bc, dd.bc, std::max(d.scale, d0.scale), tol);
        } else {
          detail::accumulate(bc, d.bc, d.scale, tol);
        }
      }
    }
  }
  res.re = re.residual;
  res.ce = ce.residual;
  res.bc = bc.residual;
  res.re_pass = re.pass;
  res.ce_pass = ce.pass;
  res.bc_pass = bc.pass;
  return res;
}

inline Json residual_to_json(const ManifoldResidual& r) {
  return Json{{"re", r.re}, {"ce", r.ce}, {"bc", r.bc}};
}

/// Raised when a network is not on the manifold an operation requires.
class ManifoldError : public Error {
 public:
  ManifoldError(const std::string& what, ManifoldResidual residual)
      : Error(what + " (re " + std::to_string(residual.re) + ", ce " + std::to_string(residual.ce) + ", bc " +
                  std::to_string(residual.bc) + ")",
              "quotient_network"),
        residual_(residual) {}

  const ManifoldResidual& residual() const noexcept { return residual_; }

 private:
  ManifoldResidual residual_;
};

/// Base network whose entries are the block sums divided by the size of the
/// output block: w~ = (1/|S_i|) sum over the block pair. On a row-equitable
/// point this equals every row sum, so the base reproduces each block's
/// values exactly.
inline Network quotient_network(const Network& net, const CloningProfile& profile, double tol = 1e-9) {
  const ManifoldResidual r = manifold_residual(net, profile, tol);
  if (!r.re_pass || !r.ce_pass) throw ManifoldError("network is not row- and column-equitable", r);
  Network base = profile.base;
  for (std::size_t i = 0; i < base.modules().size(); ++i) {
    auto& bm = base.module(i);
    const auto& cm = net.modules()[i];
    for (std::size_t p = 0; p < bm.params.size(); ++p) {
      const auto pairs = block_pairs(profile, i, static_cast<int>(p));
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        double s = 0.0;
        for (int row : pairs[k].rows)
          for (int c : pairs[k].cols) s += cm.params[p](row, c);
        bm.params[p].data()[k] = s / static_cast<double>(pairs[k].rows.size());
      }
    }
    if (!bm.buffers.empty()) {
      const auto pairs = block_pairs(profile, i, -1);
      for (std::size_t b = 0; b < bm.buffers.size(); ++b)
        for (std::size_t k = 0; k < pairs.size(); ++k) {
          double s = 0.0;
          for (int row : pairs[k].rows) s += cm.buffers[b](row, 0);
          bm.buffers[b](static_cast<Eigen::Index>(k), 0) = s / static_cast<double>(pairs[k].rows.size());
        }
    }
  }
  return base;
}

inline Json profile_to_json(const CloningProfile& p) {
  Json interfaces = Json::array();
  for (std::size_t s = 0; s < p.interfaces.size(); ++s) {
    Json blocks = Json::array();
    for (const Block& b : p.interfaces[s].units.blocks) blocks.push_back(b);
    interfaces.push_back(Json{{"slot", s}, {"factor", p.interfaces[s].factor}, {"blocks", blocks}});
  }
  return Json{{"factors", p.factors}, {"base", architecture_to_json(p.base)}, {"interfaces", interfaces}};
}

/// Rebuilds a profile around `base` (which carries the parameters) and checks
/// that the stored blocks are the ones the factors imply.
inline CloningProfile profile_from_json(const Json& j, const Network& base) {
  std::vector<int> factors;
  try {
    factors = j.at("factors").get<std::vector<int>>();
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), "profile.factors");
  }
  CloningProfile p = make_profile(base, factors);
  if (j.contains("interfaces")) {
    const Json& ifs = j.at("interfaces");
    if (!ifs.is_array() || ifs.size() != p.interfaces.size()) throw ValidationError("interface count mismatch", "profile.interfaces");
    for (std::size_t s = 0; s < ifs.size(); ++s) {
      Partition stored;
      try {
        for (const auto& b : ifs[s].at("blocks")) stored.blocks.push_back(b.get<Block>());
      } catch (const Json::exception& e) {
        throw ValidationError(e.what(), "profile.interfaces[" + std::to_string(s) + "]");
      }
      if (!(stored == p.interfaces[s].units)) {
        throw ValidationError("blocks do not match the factors", "profile.interfaces[" + std::to_string(s) + "]");
      }
    }
  }
  return p;
}

}  // namespace lop
