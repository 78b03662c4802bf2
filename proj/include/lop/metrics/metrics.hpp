#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SVD>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/manifolds/partition.hpp"

namespace lop {

/// Unit j is dead when |H_ij| < tau_val on more than tau_frac of the samples.
inline std::vector<bool> dead_units(const Matrix& h, double tau_val = 1e-7, double tau_frac = 0.95) {
  std::vector<bool> dead(static_cast<std::size_t>(h.cols()), false);
  if (h.rows() == 0) return dead;
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    Eigen::Index small = 0;
    for (Eigen::Index i = 0; i < h.rows(); ++i) small += std::abs(h(i, j)) < tau_val;
    dead[static_cast<std::size_t>(j)] = static_cast<double>(small) / static_cast<double>(h.rows()) > tau_frac;
  }
  return dead;
}

inline double dead_fraction(const Matrix& h, double tau_val = 1e-7, double tau_frac = 0.95) {
  if (h.cols() == 0) return 0.0;
  const auto d = dead_units(h, tau_val, tau_frac);
  return static_cast<double>(std::count(d.begin(), d.end(), true)) / static_cast<double>(h.cols());
}

struct DuplicateResult {
  double fraction = 0.0;
  std::vector<std::pair<int, int>> pairs;
};

/// Cosine similarity of the uncentered, L2-normalized columns. A unit counts
/// as duplicate when it is in any pair above tau_corr; zero columns never
/// pair.
inline DuplicateResult duplicate_fraction(const Matrix& h, double tau_corr = 0.95) {
  DuplicateResult r;
  const Eigen::Index w = h.cols();
  if (w == 0) return r;
  Matrix n = h;
  std::vector<bool> zero(static_cast<std::size_t>(w), false);
  for (Eigen::Index j = 0; j < w; ++j) {
    const double norm = n.col(j).norm();
    if (norm == 0.0) {
      zero[static_cast<std::size_t>(j)] = true;
    } else {
      n.col(j) /= norm;
    }
  }
  const Matrix gram = n.transpose() * n;
  std::vector<bool> dup(static_cast<std::size_t>(w), false);
  for (Eigen::Index a = 0; a < w; ++a) {
    if (zero[static_cast<std::size_t>(a)]) continue;
    for (Eigen::Index b = a + 1; b < w; ++b) {
      if (zero[static_cast<std::size_t>(b)] || !(gram(a, b) > tau_corr)) continue;
      r.pairs.emplace_back(static_cast<int>(a), static_cast<int>(b));
      dup[static_cast<std::size_t>(a)] = dup[static_cast<std::size_t>(b)] = true;
    }
  }
  r.fraction = static_cast<double>(std::count(dup.begin(), dup.end(), true)) / static_cast<double>(w);
  return r;
}

/// Unit j is saturated when |G_ij| / max(mean_i |H_ij|, eps) < tau_sat on more
/// than p_sat of the samples. G is the gradient reaching the unit's
/// pre-activation, which is exactly zero for a unit whose derivative is zero.
inline double saturated_fraction(const Matrix& h, const Matrix& g, double tau_sat = 1e-4, double p_sat = 0.99,
                                 double eps = 1e-8) {
  if (h.rows() != g.rows() || h.cols() != g.cols()) throw ValidationError("H and G shapes differ", "saturated_fraction");
  if (h.cols() == 0 || h.rows() == 0) return 0.0;
  Eigen::Index sat = 0;
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    const double mu = std::max(h.col(j).cwiseAbs().mean(), eps);
    Eigen::Index below = 0;
    for (Eigen::Index i = 0; i < h.rows(); ++i) below += std::abs(g(i, j)) / mu < tau_sat;
    sat += static_cast<double>(below) / static_cast<double>(h.rows()) > p_sat;
  }
  return static_cast<double>(sat) / static_cast<double>(h.cols());
}

struct RankMetrics {
  double effective_rank = 0.0;
  double stable_rank = 0.0;
  bool degenerate = false;
};

/// Uniform subsample without replacement of at most `cap` rows and columns,
/// drawn from a fixed seed so repeated calls agree.
inline Matrix subsample(const Matrix& h, Eigen::Index cap, std::uint64_t seed = 0) {
  if (h.rows() <= cap && h.cols() <= cap) return h;
  Rng rng(seed);
  auto pick = [&](Eigen::Index n) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (n > cap) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(cap));
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };
  const auto rows = pick(h.rows());
  const auto cols = pick(h.cols());
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = h(rows[i], cols[j]);
  return out;
}

/// Effective rank: exp of the entropy of the singular values of H normalized
/// to sum 1 (uncentered). Stable rank: ||H~||_F^4 / tr((H~^T H~)^2) for the
/// column-centered H~, i.e. (sum s^2)^2 / sum s^4.
inline RankMetrics rank_metrics(const Matrix& h_in, Eigen::Index cap = 512, std::uint64_t seed = 0) {
  if (h_in.rows() < 2) throw ValidationError("rank metrics need at least 2 samples", "rank_metrics");
  const Matrix h = subsample(h_in, cap, seed);
  RankMetrics r;
  const Eigen::VectorXd s = Eigen::BDCSVD<Eigen::MatrixXd>(Eigen::MatrixXd(h)).singularValues();
  const double total = s.sum();
  if (!(total > 0.0)) {
    r.degenerate = true;
    return r;
  }
  double ent = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double p = s(i) / total;
    if (p > 0.0) ent -= p * std::log(p);
  }
  r.effective_rank = std::exp(ent);
  const Matrix centered = h.rowwise() - h.colwise().mean();
  const Eigen::VectorXd sc = Eigen::BDCSVD<Eigen::MatrixXd>(Eigen::MatrixXd(centered)).singularValues();
  const double s2 = sc.squaredNorm();
  const double s4 = sc.array().pow(4).sum();
  if (s4 > 0.0) {
    r.stable_rank = s2 * s2 / s4;
  } else {
    r.degenerate = true;
  }
  return r;
}

struct R2Result {
  double r2 = 1.0;
  bool degenerate = false;  // zero total variance
};

/// Share of the variance of a layer's units explained by their block means:
/// 1 - mean(residual^2) / Var(all values), residual = unit minus block mean.
inline R2Result cloning_r2(const Matrix& values, const Partition& blocks) {
  blocks.validate(static_cast<int>(values.cols()), "cloning_r2");
  R2Result r;
  const double n = static_cast<double>(values.size());
  if (n == 0.0) return r;
  const double mean = values.mean();
  const double total = (values.array() - mean).square().sum() / n;
  double resid = 0.0;
  for (const Block& b : blocks.blocks) {
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      double m = 0.0;
      for (int u : b) m += values(i, u);
      m /= static_cast<double>(b.size());
      for (int u : b) resid += (values(i, u) - m) * (values(i, u) - m);
    }
  }
  resid /= n;
  if (!(total > 0.0)) {
    r.degenerate = true;
    r.r2 = resid == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.r2 = 1.0 - resid / total;
  return r;
}

struct LayerMetrics {
  std::string name;
  int width = 0;
  double dead_frac = 0.0;
  double dup_frac = 0.0;
  double sat_frac = 0.0;
  double eff_rank = 0.0;
  double stable_rank = 0.0;
};

struct MetricsOptions {
  double dead_tau = 1e-7;
  double dead_frac = 0.95;
  double dup_tau = 0.95;
  double sat_tau = 1e-4;
  double sat_p = 0.99;
  double sat_eps = 1e-8;
  Eigen::Index svd_cap = 512;
};

struct MetricsReport {
  long step = 0;
  std::vector<LayerMetrics> layers;
  LayerMetrics mean;  // network-level means over layers
  bool has_r2 = false;
  double r2_forward = 1.0;
  double r2_backward = 1.0;
  double loss = 0.0;
  bool has_accuracy = false;
  double accuracy = 0.0;
};

/// Per-layer metrics for every activation module, from a forward and
/// backward pass on a probe batch. Layer H is the activation output; G is
/// the adjoint at the activation input.
inline MetricsReport compute_metrics(const Network& net, const BatchActivations& acts, const MetricsOptions& opt = {}) {
  if (!acts.has_adjoints) throw Error("metrics need a backward pass", "compute_metrics");
  MetricsReport rep;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    if (m.kind != ModuleKind::Activation) continue;
    const Matrix& h = acts.post[i + 1];
    const Matrix& g = acts.adjoint[static_cast<std::size_t>(m.inputs[0])];
    LayerMetrics l;
    l.name = m.name;
    l.width = static_cast<int>(h.cols());
    l.dead_frac = dead_fraction(h, opt.dead_tau, opt.dead_frac);
    l.dup_frac = duplicate_fraction(h, opt.dup_tau).fraction;
    l.sat_frac = saturated_fraction(h, g, opt.sat_tau, opt.sat_p, opt.sat_eps);
    if (h.rows() >= 2) {
      const RankMetrics rm = rank_metrics(h, opt.svd_cap);
      l.eff_rank = rm.effective_rank;
      l.stable_rank = rm.stable_rank;
    }
    rep.layers.push_back(l);
  }
  if (!rep.layers.empty()) {
    const double k = static_cast<double>(rep.layers.size());
    rep.mean.name = "mean";
    for (const auto& l : rep.layers) {
      rep.mean.width += l.width;
      rep.mean.dead_frac += l.dead_frac / k;
      rep.mean.dup_frac += l.dup_frac / k;
      rep.mean.sat_frac += l.sat_frac / k;
      rep.mean.eff_rank += l.eff_rank / k;
      rep.mean.stable_rank += l.stable_rank / k;
    }
  }
  return rep;
}

/// Flat JSON row: step, loss, network means, then one key per metric per
/// layer (`<layer>.<metric>`).
inline Json report_to_json(const MetricsReport& r) {
  Json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  if (r.has_accuracy) j["accuracy"] = r.accuracy;
  j["dead_frac"] = r.mean.dead_frac;
  j["dup_frac"] = r.mean.dup_frac;
  j["sat_frac"] = r.mean.sat_frac;
  j["eff_rank"] = r.mean.eff_rank;
  j["stable_rank"] = r.mean.stable_rank;
  if (r.has_r2) {
    j["r2_forward"] = r.r2_forward;
    j["r2_backward"] = r.r2_backward;
  }
  for (const auto& l : r.layers) {
    j[l.name + ".dead_frac"] = l.dead_frac;
    j[l.name + ".dup_frac"] = l.dup_frac;
    j[l.name + ".sat_frac"] = l.sat_frac;
    j[l.name + ".eff_rank"] = l.eff_rank;
    j[l.name + ".stable_rank"] = l.stable_rank;
  }
  return j;
}

}  // namespace lop
