#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "lop/bench/bitflip.hpp"
#include "lop/bench/tasks.hpp"
#include "lop/core/finite_diff.hpp"
#include "lop/core/random_arch.hpp"
#include "lop/harness/config.hpp"
#include "lop/harness/runlog.hpp"
#include "lop/kernel/kernel.hpp"
#include "lop/manifolds/certificate.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/manifolds/confinement.hpp"
#include "lop/metrics/metrics.hpp"
#include "lop/optim/cbp.hpp"
#include "lop/optim/optimizer.hpp"

namespace lop {

using RowSink = std::function<void(const Json&)>;

struct RunResult {
  std::vector<Json> rows;
  Json summary = Json::object();
};

/// Independent streams of one run, all derived from the run seed.
enum Stream : std::uint64_t { kInit = 1, kData = 2, kTarget = 3, kProbe = 4, kOptim = 5, kCbp = 6, kForward = 7 };

namespace detail {

inline OptimizerConfig seeded(OptimizerConfig c, std::uint64_t seed) {
  c.seed = derive_seed(derive_seed(seed, kOptim), c.seed);
  return c;
}

inline void emit(RunResult& r, const RowSink& sink, Json row) {
  if (sink) sink(row);
  r.rows.push_back(std::move(row));
}

/// Metrics of `net` on the fixed probe batch, evaluated without dropout.
inline MetricsReport probe_metrics(const Network& net, const Matrix& x, const Matrix& y, LossKind loss) {
  auto r = loss_and_gradients(net, x, y, loss, Mode::Eval);
  MetricsReport rep = compute_metrics(net, r.acts);
  rep.loss = r.loss;
  return rep;
}

inline Json metrics_row(long step, const MetricsReport& probe, double online_loss) {
  Json row = report_to_json(probe);
  row["step"] = step;
  row["probe_loss"] = probe.loss;
  row["loss"] = online_loss;
  return row;
}

}  // namespace detail

/// Online regression on the bit-flipping stream. Steps up to cbp_start use
/// the plain optimizer (phase "sgd"); later steps add CBP (phase "cbp").
inline RunResult run_bitflip(const ExperimentConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  const BitflipConfig& bc = cfg.bitflip;
  const LtuTarget target = build_ltu_target(bc.m, bc.f, bc.beta, bc.target_width, derive_seed(seed, kTarget));
  BitflipStream stream(target, bc.period, derive_seed(seed, kData));
  Network net = build_network(cfg.architecture, derive_seed(seed, kInit));
  Optimizer opt(detail::seeded(cfg.optimizer, seed), net);
  CbpConfig cc = cfg.cbp;
  cc.seed = derive_seed(derive_seed(seed, kCbp), cc.seed);
  CbpState cbp = cfg.use_cbp ? cbp_init(net, cc) : CbpState{};

  Rng prng(derive_seed(seed, kProbe));
  Matrix px(cfg.probe_size, bc.m + 1), py(cfg.probe_size, 1);
  for (int i = 0; i < cfg.probe_size; ++i) {
    for (int j = 0; j < bc.m; ++j) px(i, j) = std::bernoulli_distribution(0.5)(prng) ? 1.0 : 0.0;
    px(i, bc.m) = 1.0;
    py(i, 0) = target(px.row(i).transpose());
  }

  RunResult res;
  double loss_sum = 0.0;
  long loss_n = 0, replaced = 0, replaced_total = 0;
  const std::uint64_t fseed = derive_seed(seed, kForward);
  for (long t = 1; t <= cfg.steps; ++t) {
    auto [x, y] = stream.batch(cfg.batch_size);
    auto r = loss_and_gradients(net, x, y, cfg.loss, cfg.train_mode, derive_seed(fseed, static_cast<std::uint64_t>(t)));
    update_running_stats(net, r.acts);
    loss_sum += r.loss;
    ++loss_n;
    opt.step(net, r.grads);
    const bool cbp_phase = cfg.use_cbp && t > cfg.cbp_start;
    if (cbp_phase) replaced += static_cast<long>(cbp_step(cbp, net, r.acts, &opt).size());
    if (t % cfg.cadence == 0 || t == cfg.steps) {
      Json row = detail::metrics_row(t, detail::probe_metrics(net, px, py, cfg.loss), loss_sum / static_cast<double>(loss_n));
      row["phase"] = cbp_phase ? "cbp" : "sgd";
      row["replacements"] = replaced;
      detail::emit(res, sink, std::move(row));
      replaced_total += replaced;
      loss_sum = 0.0;
      loss_n = 0;
      replaced = 0;
    }
  }
  res.summary["replacements"] = replaced_total;
  return res;
}

/// Class-incremental Gaussian-cluster tasks, one after another, with the
/// output layer (and its optimizer state) zeroed at each task start when
/// reset_head is set.
inline RunResult run_continual(const ExperimentConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  const TaskSequence seq = make_task_sequence(cfg.tasks, derive_seed(seed, kData));
  const int k = cfg.tasks.classes_per_task;
  Network net = build_network(cfg.architecture, derive_seed(seed, kInit));
  Optimizer opt(detail::seeded(cfg.optimizer, seed), net);
  CbpConfig cc = cfg.cbp;
  cc.seed = derive_seed(derive_seed(seed, kCbp), cc.seed);
  CbpState cbp = cfg.use_cbp ? cbp_init(net, cc) : CbpState{};

  Rng prng(derive_seed(seed, kProbe));
  Matrix px(cfg.probe_size, cfg.tasks.dim);
  std::vector<int> plabels;
  for (int i = 0; i < cfg.probe_size; ++i) {
    const auto& task = seq.tasks[std::uniform_int_distribution<std::size_t>(0, seq.tasks.size() - 1)(prng)];
    const int row = std::uniform_int_distribution<int>(0, static_cast<int>(task.x.rows()) - 1)(prng);
    px.row(i) = task.x.row(row);
    plabels.push_back(task.labels[static_cast<std::size_t>(row)]);
  }
  const Matrix py = one_hot(plabels, k);

  std::size_t head = net.modules().size();
  while (head-- > 0 && net.modules()[head].params.empty()) {
  }

  RunResult res;
  Rng brng(derive_seed(seed, kData + 100));
  const std::uint64_t fseed = derive_seed(seed, kForward);
  double loss_sum = 0.0, acc_sum = 0.0;
  long n = 0, t = 0;
  for (std::size_t ti = 0; ti < seq.tasks.size(); ++ti) {
    const Task& task = seq.tasks[ti];
    if (cfg.reset_head && ti > 0) {
      reset_output_layer(net);
      for (std::size_t p = 0; p < net.modules()[head].params.size(); ++p)
        for (Eigen::Index r = 0; r < net.modules()[head].params[p].rows(); ++r) opt.reset_row(head, p, r);
    }
    std::uniform_int_distribution<int> pick(0, static_cast<int>(task.x.rows()) - 1);
    for (long s = 0; s < cfg.steps_per_task; ++s) {
      ++t;
      std::vector<int> rows;
      for (int i = 0; i < cfg.batch_size; ++i) rows.push_back(pick(brng));
      auto [x, y] = task_batch(task, rows, k);
      auto r = loss_and_gradients(net, x, y, cfg.loss, cfg.train_mode, derive_seed(fseed, static_cast<std::uint64_t>(t)));
      update_running_stats(net, r.acts);
      loss_sum += r.loss;
      acc_sum += accuracy(r.acts.output(), y);
      ++n;
      opt.step(net, r.grads);
      const bool cbp_phase = cfg.use_cbp && t > cfg.cbp_start;
      if (cbp_phase) cbp_step(cbp, net, r.acts, &opt);
      if (t % cfg.cadence == 0 || t == cfg.steps) {
        Json row = detail::metrics_row(t, detail::probe_metrics(net, px, py, cfg.loss), loss_sum / static_cast<double>(n));
        row["accuracy"] = acc_sum / static_cast<double>(n);
        row["task"] = static_cast<int>(ti);
        row["phase"] = cbp_phase ? "cbp" : "sgd";
        detail::emit(res, sink, std::move(row));
        loss_sum = acc_sum = 0.0;
        n = 0;
      }
    }
  }
  return res;
}

/// Base and clone trained in lockstep on identical regression batches; one
/// confinement row per cadence step plus step 0.
inline RunResult run_cloning(const ExperimentConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  const Network base = build_network(cfg.architecture, derive_seed(seed, kInit));
  const ClonedNetwork c = clone_network(base, cfg.clone.alpha, CloneOptions{cfg.clone.redistribute, derive_seed(seed, kCbp)});
  const int in = base.input_shape().size();
  const int out = base.modules().back().out_shape.size();
  const Network teacher = make_mlp(in, {cfg.clone.teacher_width}, out, ActivationFn::Tanh, derive_seed(seed, kTarget));
  const bool use_teacher = cfg.clone.teacher;
  const int batch = cfg.batch_size;
  auto draw = [&](Rng& r, int rows) {
    Matrix x = gaussian_matrix(r, rows, in);
    Matrix y = use_teacher ? forward(teacher, x, Mode::Eval).output() : gaussian_matrix(r, rows, out);
    return std::make_pair(std::move(x), std::move(y));
  };
  const std::uint64_t dseed = derive_seed(seed, kData);
  TaskStream stream = [&](long t) {
    Rng r(derive_seed(dseed, static_cast<std::uint64_t>(t)));
    return draw(r, batch);
  };
  Rng prng(derive_seed(seed, kProbe));
  const auto [px, py] = draw(prng, cfg.probe_size);
  ConfinementOptions o;
  o.steps = cfg.steps;
  o.loss = cfg.loss;
  o.train_mode = cfg.train_mode;
  o.cadence = cfg.cadence;
  o.escape_threshold = cfg.clone.escape_threshold;
  o.seed = derive_seed(seed, kForward);
  RunResult res;
  const auto cr = confinement_run(base, c.net, c.profile, detail::seeded(cfg.optimizer, seed), stream, px, py, o,
                                  [&](const ConfinementRow& row) { detail::emit(res, sink, confinement_row_to_json(row)); });
  res.summary["first_escape_step"] = cr.first_escape_step;
  return res;
}

/// One row per (activation, a, b): decorrelation strength, local rate, the
/// fixed point r* and the frozen proxy E[phi'(aZ + b)^2].
inline RunResult run_kernel_sweep(const ExperimentConfig& cfg, const RowSink& sink = {}) {
  RunResult res;
  long i = 0;
  for (ActivationFn fn : cfg.sweep.activations)
    for (const RegimeRow& r : regime_sweep(fn, cfg.sweep.a_grid, cfg.sweep.b_grid, cfg.sweep.kernel)) {
      auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
      detail::emit(res, sink,
                   Json{{"step", i++},
                        {"activation", to_string(fn)},
                        {"a", r.a},
                        {"b", r.b},
                        {"kappa", num(r.kappa)},
                        {"alpha", num(r.alpha)},
                        {"r_star", num(r.r_star)},
                        {"frozen_proxy", r.frozen_proxy},
                        {"degenerate", r.degenerate}});
    }
  return res;
}

/// Oracle suite: gradients against finite differences on random
/// architectures, module certificates, whole-network cloning, a short
/// confinement run and the kernel against Monte Carlo. Rows carry
/// {check, pass, value, tolerance}; summary.pass is their conjunction.
inline RunResult run_verify(std::uint64_t seed, const RowSink& sink = {}) {
  RunResult res;
  long step = 0;
  bool all = true;
  auto check = [&](const std::string& name, bool pass, double value, double tol) {
    all = all && pass;
    detail::emit(res, sink, Json{{"step", step++}, {"check", name}, {"pass", pass}, {"value", value}, {"tolerance", tol}});
  };

  double worst = 0.0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    const RandomProblem p = random_problem(derive_seed(seed, 100 + k));
    worst = std::max(worst, gradient_check(p.net, p.x, p.y, p.loss, 1e-6, p.mode, k).max_relative_error);
  }
  check("gradient.finite_difference", worst < 1e-6, worst, 1e-6);

  const ClonedNetwork all_kinds = clone_network(all_kinds_network(derive_seed(seed, 200)), 2);
  double cert_dev = 0.0;
  bool dropout_fails = true;
  for (const auto& rep : certify_network(all_kinds.net, all_kinds.profile)) {
    if (rep.module.rfind("dropout", 0) == 0) {
      dropout_fails = dropout_fails && !rep.mc1.pass;
    } else {
      cert_dev = std::max({cert_dev, rep.mc1.deviation, rep.mc2.deviation, rep.mc3.deviation});
    }
  }
  check("certificate.modules", cert_dev < 1e-12, cert_dev, 1e-12);
  check("certificate.dropout_fails_mc1", dropout_fails, dropout_fails ? 1.0 : 0.0, 1.0);

  {
    const Network base = all_kinds_network(derive_seed(seed, 201), 0.0);
    const ClonedNetwork c = clone_network(base, 2);
    Rng rng(derive_seed(seed, 202));
    const CloningCheck chk = cloning_check(c.net, c.profile, gaussian_matrix(rng, 6, base.input_shape().size()), Mode::Train, seed, &base);
    const double spread = std::max({chk.forward_spread, chk.backward_spread, chk.gradient_spread, chk.base_deviation});
    check("cloning.forward_backward", spread < 1e-12, spread, 1e-12);
  }

  {
    const Network base = make_mlp(4, {8, 16, 8}, 2, ActivationFn::Relu, derive_seed(seed, 203));
    const ClonedNetwork c = clone_network(base, 2);
    Rng prng(derive_seed(seed, 204));
    const Matrix px = gaussian_matrix(prng, 64, 4), py = gaussian_matrix(prng, 64, 2);
    TaskStream stream = [&](long t) {
      Rng r(derive_seed(derive_seed(seed, 205), static_cast<std::uint64_t>(t)));
      Matrix x = gaussian_matrix(r, 16, 4);
      return std::make_pair(x, gaussian_matrix(r, 16, 2));
    };
    ConfinementOptions o;
    o.steps = 200;
    o.cadence = 10;
    OptimizerConfig oc;
    oc.lr = 0.01;
    const auto cr = confinement_run(base, c.net, c.profile, oc, stream, px, py, o);
    double bc = 0.0, r2 = 1.0;
    for (const auto& row : cr.rows) {
      bc = std::max(bc, row.residual.bc);
      r2 = std::min({r2, row.r2_forward, row.r2_backward});
    }
    check("confinement.bc_residual", bc < 1e-8, bc, 1e-8);
    check("confinement.r2", r2 >= 1.0 - 1e-10, 1.0 - r2, 1e-10);
  }

  for (ActivationFn fn : {ActivationFn::Relu, ActivationFn::Tanh, ActivationFn::Gelu}) {
    const ScalarActivation act{fn, 1.0, 0.0, 0.25};
    const CorrelationKernel k = make_kernel(act);
    double worst_z = 0.0;
    for (double r : {-0.5, 0.0, 0.5, 0.9}) {
      const McEstimate mc = kernel_mc_oracle(act, r, 200000, derive_seed(seed, 300));
      worst_z = std::max(worst_z, std::abs(kernel_eval(k, r) - mc.value) / std::max(mc.standard_error, 1e-300));
    }
    check("kernel.monte_carlo." + to_string(fn), worst_z < 4.0, worst_z, 4.0);
  }
  res.summary["pass"] = all;
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const RowSink& sink = {}) {
  switch (cfg.kind) {
    case ExperimentKind::Bitflip: return run_bitflip(cfg, seed, sink);
    case ExperimentKind::Continual: return run_continual(cfg, seed, sink);
    case ExperimentKind::Cloning: return run_cloning(cfg, seed, sink);
    case ExperimentKind::KernelSweep: return run_kernel_sweep(cfg, sink);
    case ExperimentKind::Verify: return run_verify(seed, sink);
  }
  throw Error("unknown experiment kind");
}

inline std::filesystem::path log_path(const ExperimentConfig& cfg, std::uint64_t seed) {
  return output_root() / cfg.output_dir / ("seed_" + std::to_string(seed) + ".jsonl");
}

/// Runs every seed and writes one log per seed under the output root, with
/// up to `jobs` seeds in flight (one thread per run, no shared writers). A
/// run that fails midway keeps the rows already written; the first failure
/// in seed order is rethrown after all workers finish.
inline std::vector<std::string> run_all(const ExperimentConfig& cfg, int jobs = 1,
                                        const std::function<void(std::uint64_t, const RunResult&)>& done = {}) {
  const std::size_t n = cfg.seeds.size();
  std::vector<std::string> paths(n);
  std::vector<RunResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        const std::uint64_t seed = cfg.seeds[i];
        paths[i] = log_path(cfg, seed).string();
        RunLogWriter log(paths[i], cfg.raw, seed);
        results[i] = run_experiment(cfg, seed, [&](const Json& row) { log.write(row); });
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t k = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < k; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (done)
    for (std::size_t i = 0; i < n; ++i) done(cfg.seeds[i], results[i]);
  return paths;
}

}  // namespace lop
