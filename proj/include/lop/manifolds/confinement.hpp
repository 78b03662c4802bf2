#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/metrics/metrics.hpp"
#include "lop/optim/optimizer.hpp"

namespace lop {

struct NetworkR2 {
  double forward = 1.0;
  double backward = 1.0;
  std::vector<double> forward_per_slot;
  std::vector<double> backward_per_slot;
};

/// Cloning R^2 of every cloned slot (factor > 1), averaged over slots, for
/// the values and, when present, the adjoints of one batch.
inline NetworkR2 network_cloning_r2(const BatchActivations& acts, const CloningProfile& profile) {
  NetworkR2 r;
  double f = 0.0, b = 0.0;
  for (std::size_t s = 0; s < acts.post.size(); ++s) {
    const InterfaceProfile& iface = profile.slot(static_cast<int>(s));
    if (iface.factor < 2) continue;
    r.forward_per_slot.push_back(cloning_r2(acts.post[s], iface.units).r2);
    f += r.forward_per_slot.back();
    if (acts.has_adjoints) {
      r.backward_per_slot.push_back(cloning_r2(acts.adjoint[s], iface.units).r2);
      b += r.backward_per_slot.back();
    }
  }
  if (!r.forward_per_slot.empty()) r.forward = f / static_cast<double>(r.forward_per_slot.size());
  if (!r.backward_per_slot.empty()) r.backward = b / static_cast<double>(r.backward_per_slot.size());
  return r;
}

struct ConfinementRow {
  long step = 0;
  ManifoldResidual residual;
  double r2_forward = 1.0;
  double r2_backward = 1.0;
  double loss_base = 0.0;
  double loss_clone = 0.0;
};

inline Json confinement_row_to_json(const ConfinementRow& r) {
  return Json{{"step", r.step},
              {"residual_re", r.residual.re},
              {"residual_ce", r.residual.ce},
              {"residual_bc", r.residual.bc},
              {"r2_forward", r.r2_forward},
              {"r2_backward", r.r2_backward},
              {"loss_base", r.loss_base},
              {"loss_clone", r.loss_clone}};
}

struct ConfinementOptions {
  long steps = 1000;
  LossKind loss = LossKind::Mse;
  Mode train_mode = Mode::Train;
  long cadence = 1;
  double escape_threshold = 0.99;  // on the mean of forward and backward R^2
  double tol = 1e-9;
  std::uint64_t seed = 0;
};

struct ConfinementResult {
  std::vector<ConfinementRow> rows;
  long first_escape_step = -1;
  Network base;
  Network clone;

  bool escaped() const { return first_escape_step >= 0; }
};

/// Training batch (x, y) in base layout for a given step.
using TaskStream = std::function<std::pair<Matrix, Matrix>(long step)>;

/// Trains `base` and `clone` in lockstep on the same batches, each with its
/// own optimizer built from `opt_cfg`, and records the clone's distance to its
/// manifold (bc measured on the displacement from the starting point) and its
/// cloning R^2 on a fixed probe batch in eval mode. Rows are emitted at step
/// 0 and every `cadence` steps; `sink` sees each row as it is produced.
inline ConfinementResult confinement_run(Network base, Network clone, const CloningProfile& profile,
                                         const OptimizerConfig& opt_cfg, const TaskStream& stream, const Matrix& probe_x,
                                         const Matrix& probe_y, const ConfinementOptions& opt = {},
                                         const std::function<void(const ConfinementRow&)>& sink = {}) {
  const Network start = clone;
  const int out_slot = clone.output_slot();
  Optimizer base_opt(opt_cfg, base);
  OptimizerConfig clone_cfg = opt_cfg;
  clone_cfg.seed = derive_seed(opt_cfg.seed, 1);
  Optimizer clone_opt(clone_cfg, clone);
  if (opt_cfg.tie_clones) clone_opt.tie(profile);
  const Matrix probe_xc = expand_input(probe_x, profile);
  const Matrix probe_yc = expand_units(probe_y, profile.slot(out_slot));

  ConfinementResult res;
  auto record = [&](long step) {
    ConfinementRow row;
    row.step = step;
    row.residual = manifold_residual(clone, profile, opt.tol, &start);
    auto rc = loss_and_gradients(clone, probe_xc, probe_yc, opt.loss, Mode::Eval);
    const NetworkR2 r2 = network_cloning_r2(rc.acts, profile);
    row.r2_forward = r2.forward;
    row.r2_backward = r2.backward;
    row.loss_clone = rc.loss;
    row.loss_base = loss_value(opt.loss, forward(base, probe_x, Mode::Eval).output(), probe_y);
    if (res.first_escape_step < 0 && 0.5 * (row.r2_forward + row.r2_backward) < opt.escape_threshold) {
      res.first_escape_step = step;
    }
    res.rows.push_back(row);
    if (sink) sink(row);
  };

  record(0);
  for (long t = 1; t <= opt.steps; ++t) {
    auto [x, y] = stream(t);
    const std::uint64_t s = derive_seed(opt.seed, static_cast<std::uint64_t>(t));
    auto rb = loss_and_gradients(base, x, y, opt.loss, opt.train_mode, s);
    update_running_stats(base, rb.acts);
    base_opt.step(base, rb.grads);
    auto rc = loss_and_gradients(clone, expand_input(x, profile), expand_units(y, profile.slot(out_slot)), opt.loss,
                                 opt.train_mode, s);
    update_running_stats(clone, rc.acts);
    clone_opt.step(clone, rc.grads);
    if (t % opt.cadence == 0) record(t);
  }
  res.base = std::move(base);
  res.clone = std::move(clone);
  return res;
}

}  // namespace lop
