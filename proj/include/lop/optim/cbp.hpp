#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/optim/optimizer.hpp"

namespace lop {

enum class UtilityKind { Contribution, Adaptable };

inline std::string to_string(UtilityKind k) { return k == UtilityKind::Contribution ? "contribution" : "adaptable"; }

inline UtilityKind utility_from_string(const std::string& s) {
  if (s == "contribution") return UtilityKind::Contribution;
  if (s == "adaptable") return UtilityKind::Adaptable;
  throw ValidationError("unknown utility '" + s + "'", "optimizer.utility");
}

struct CbpConfig {
  double rho = 0.99;
  long maturity = 100;
  double replace_rate = 1e-4;
  UtilityKind utility = UtilityKind::Contribution;
  std::uint64_t seed = 0;
};

/// One recycled hidden layer: linear `in_module` -> activation `act_module`
/// -> linear `out_module`. `utility` and `mean_act` are raw exponential
/// averages; the bias-corrected values divide by 1 - rho^age.
struct CbpLayer {
  std::size_t in_module = 0;
  std::size_t act_module = 0;
  std::size_t out_module = 0;
  Vector utility;
  Vector mean_act;
  std::vector<long> age;
  double pending = 0.0;  // fractional replacements carried between steps
};

struct CbpState {
  CbpConfig config;
  std::vector<CbpLayer> layers;
  Rng rng;
  long step = 0;
};

struct Replacement {
  long step = 0;
  std::string layer;
  int neuron = 0;
  long age = 0;
  double utility = 0.0;
};

inline Json replacement_to_json(const Replacement& r) {
  return Json{{"step", r.step}, {"layer", r.layer}, {"neuron", r.neuron}, {"age", r.age}, {"utility", r.utility}};
}

/// Finds every activation fed directly by a linear module and read only by a
/// single linear module.
inline CbpState cbp_init(const Network& net, const CbpConfig& cfg) {
  if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw ValidationError("rho must be in (0, 1)", "optimizer.rho");
  if (cfg.replace_rate < 0.0) throw ValidationError("replacement rate must be non-negative", "optimizer.r_replace");
  if (cfg.maturity < 0) throw ValidationError("maturity must be non-negative", "optimizer.tau_maturity");
  CbpState st{cfg, {}, Rng(cfg.seed), 0};
  const auto& mods = net.modules();
  for (std::size_t i = 0; i < mods.size(); ++i) {
    if (mods[i].kind != ModuleKind::Activation || mods[i].inputs[0] == 0) continue;
    const auto producer = static_cast<std::size_t>(mods[i].inputs[0] - 1);
    if (mods[producer].kind != ModuleKind::Linear) continue;
    std::vector<std::size_t> readers;
    for (std::size_t k = 0; k < mods.size(); ++k)
      for (int s : mods[k].inputs)
        if (s == static_cast<int>(i) + 1) readers.push_back(k);
    if (readers.size() != 1 || mods[readers[0]].kind != ModuleKind::Linear) continue;
    CbpLayer l;
    l.in_module = producer;
    l.act_module = i;
    l.out_module = readers[0];
    const auto n = mods[i].out_shape.size();
    l.utility = Vector::Zero(n);
    l.mean_act = Vector::Zero(n);
    l.age.assign(static_cast<std::size_t>(n), 0);
    st.layers.push_back(std::move(l));
  }
  if (st.layers.empty()) throw ValidationError("network has no linear-activation-linear layer to recycle", "cbp");
  return st;
}

/// Instantaneous utility of every unit of a layer from batch activations h:
/// contribution = mean|h_i| * sum_k |W_out[k, i]|; adaptable replaces |h_i| by
/// |h_i - mean_i| and divides by sum_j |W_in[i, j]|.
inline Vector instant_utility(const Network& net, const CbpLayer& l, const Matrix& h, UtilityKind kind,
                              const Vector& mean_hat) {
  const Matrix& w_out = net.modules()[l.out_module].params[0];
  const Matrix& w_in = net.modules()[l.in_module].params[0];
  Vector u(h.cols());
  for (Eigen::Index i = 0; i < h.cols(); ++i) {
    const double out = w_out.col(i).cwiseAbs().sum();
    if (kind == UtilityKind::Contribution) {
      u(i) = h.col(i).cwiseAbs().mean() * out;
    } else {
      const double in = std::max(w_in.row(i).cwiseAbs().sum(), 1e-12);
      u(i) = (h.col(i).array() - mean_hat(i)).abs().mean() * out / in;
    }
  }
  return u;
}

/// Bias-corrected utility u_i / (1 - rho^age_i); 0 for a unit of age 0.
inline double corrected(double raw, long age, double rho) {
  return age > 0 ? raw / (1.0 - std::pow(rho, static_cast<double>(age))) : 0.0;
}

/// Kaiming-uniform incoming weights U(-sqrt(6 / fan_in), sqrt(6 / fan_in)),
/// zero bias, zero outgoing weights after moving the unit's mean output into
/// the next layer's bias; utility, running mean and age restart at 0 and the
/// optimizer forgets the touched entries.
inline void reinitialize_unit(CbpState& st, CbpLayer& l, Network& net, Eigen::Index i, Optimizer* opt) {
  auto& in = net.module(l.in_module);
  auto& out = net.module(l.out_module);
  const double bound = std::sqrt(6.0 / static_cast<double>(in.params[0].cols()));
  for (Eigen::Index j = 0; j < in.params[0].cols(); ++j) in.params[0](i, j) = uniform(st.rng, -bound, bound);
  in.params[1](i, 0) = 0.0;
  const double h_bar = corrected(l.mean_act(i), l.age[static_cast<std::size_t>(i)], st.config.rho);
  out.params[1] += out.params[0].col(i) * h_bar;
  out.params[0].col(i).setZero();
  l.utility(i) = 0.0;
  l.mean_act(i) = 0.0;
  l.age[static_cast<std::size_t>(i)] = 0;
  if (opt != nullptr) {
    opt->reset_row(l.in_module, 0, i);
    opt->reset_row(l.in_module, 1, i);
    opt->reset_col(l.out_module, 0, i);
  }
}

/// One generate-and-test step after the inner optimizer step: update the
/// running utilities from this batch's activations, then replace the
/// lowest-utility mature units. Replacements per layer accumulate at
/// replace_rate times the number of mature units, so at most
/// ceil(replace_rate * width) units change in one step.
inline std::vector<Replacement> cbp_step(CbpState& st, Network& net, const BatchActivations& acts, Optimizer* opt = nullptr) {
  std::vector<Replacement> log;
  ++st.step;
  const double rho = st.config.rho;
  for (auto& l : st.layers) {
    const Matrix& h = acts.post.at(l.act_module + 1);
    const Eigen::Index n = h.cols();
    for (auto& a : l.age) ++a;
    const Vector batch_mean = h.colwise().mean().transpose();
    l.mean_act = rho * l.mean_act + (1.0 - rho) * batch_mean;
    Vector mean_hat(n);
    for (Eigen::Index i = 0; i < n; ++i) mean_hat(i) = corrected(l.mean_act(i), l.age[static_cast<std::size_t>(i)], rho);
    l.utility = rho * l.utility + (1.0 - rho) * instant_utility(net, l, h, st.config.utility, mean_hat);

    std::vector<Eigen::Index> mature;
    for (Eigen::Index i = 0; i < n; ++i)
      if (l.age[static_cast<std::size_t>(i)] > st.config.maturity) mature.push_back(i);
    if (mature.empty()) continue;
    l.pending += st.config.replace_rate * static_cast<double>(mature.size());
    if (l.pending < 1.0) continue;
    const auto count = std::min(static_cast<std::size_t>(l.pending), mature.size());
    l.pending -= static_cast<double>(count);
    std::vector<double> score(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      score[static_cast<std::size_t>(i)] = corrected(l.utility(i), l.age[static_cast<std::size_t>(i)], rho);
    std::stable_sort(mature.begin(), mature.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return score[static_cast<std::size_t>(a)] < score[static_cast<std::size_t>(b)]; });
    for (std::size_t k = 0; k < count; ++k) {
      const Eigen::Index i = mature[k];
      log.push_back({st.step, net.modules()[l.act_module].name, static_cast<int>(i), l.age[static_cast<std::size_t>(i)],
                     score[static_cast<std::size_t>(i)]});
      reinitialize_unit(st, l, net, i, opt);
    }
  }
  return log;
}

inline CbpConfig cbp_from_json(const Json& j, const std::string& where = "optimizer") {
  CbpConfig c;
  try {
    c.rho = j.value("rho", c.rho);
    c.maturity = j.value("tau_maturity", c.maturity);
    c.replace_rate = j.value("r_replace", c.replace_rate);
    if (j.contains("utility")) c.utility = utility_from_string(j.at("utility").get<std::string>());
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), where);
  }
  if (!(c.rho > 0.0 && c.rho < 1.0)) throw ValidationError("rho must be in (0, 1)", where + ".rho");
  if (c.replace_rate < 0.0 || c.replace_rate > 1.0) throw ValidationError("r_replace must be in [0, 1]", where + ".r_replace");
  if (c.maturity < 0) throw ValidationError("tau_maturity must be non-negative", where + ".tau_maturity");
  return c;
}

}  // namespace lop
