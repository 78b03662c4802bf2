#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "lop/bench/bitflip.hpp"
#include "lop/bench/tasks.hpp"
#include "lop/core/builder.hpp"
#include "lop/core/json.hpp"
#include "lop/core/serialize.hpp"
#include "lop/kernel/kernel.hpp"
#include "lop/optim/cbp.hpp"
#include "lop/optim/optimizer.hpp"

namespace lop {

enum class ExperimentKind { Continual, Cloning, Bitflip, KernelSweep, Verify };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Continual: return "continual";
    case ExperimentKind::Cloning: return "cloning";
    case ExperimentKind::Bitflip: return "bitflip";
    case ExperimentKind::KernelSweep: return "kernel-sweep";
    case ExperimentKind::Verify: return "verify";
  }
  return "?";
}

inline ExperimentKind experiment_from_string(const std::string& s) {
  if (s == "continual") return ExperimentKind::Continual;
  if (s == "cloning") return ExperimentKind::Cloning;
  if (s == "bitflip") return ExperimentKind::Bitflip;
  if (s == "kernel-sweep") return ExperimentKind::KernelSweep;
  if (s == "verify") return ExperimentKind::Verify;
  throw ValidationError("unknown experiment kind '" + s + "'", "kind");
}

/// Regression data for cloning runs: fresh Gaussian inputs each step with
/// either Gaussian targets or the outputs of a fixed random tanh teacher.
struct CloneConfig {
  int alpha = 2;
  double redistribute = 0.0;
  double escape_threshold = 0.99;
  bool teacher = false;
  int teacher_width = 32;
};

struct SweepConfig {
  std::vector<ActivationFn> activations{ActivationFn::Relu, ActivationFn::Tanh, ActivationFn::Gelu};
  std::vector<double> a_grid{0.5, 1.0, 2.0};
  std::vector<double> b_grid{-1.0, 0.0, 1.0};
  KernelOptions kernel;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Cloning;
  Json architecture;
  OptimizerConfig optimizer;
  bool use_cbp = false;
  long cbp_start = 0;  // first step trained with CBP when use_cbp
  CbpConfig cbp;
  BitflipConfig bitflip;
  TaskConfig tasks;
  long steps_per_task = 1000;
  bool reset_head = true;
  CloneConfig clone;
  SweepConfig sweep;
  long steps = 1000;
  int batch_size = 32;
  LossKind loss = LossKind::Mse;
  Mode train_mode = Mode::Train;
  long cadence = 100;
  int probe_size = 512;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs";
  Json raw;  // the validated document, defaults not filled in
};

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ValidationError("unknown field", where.empty() ? it.key() : where + "." + it.key());
}

template <typename T>
T field(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ValidationError("wrong type", where.empty() ? std::string(key) : where + "." + key);
  }
}

}  // namespace detail

/// Network for an architecture block: either a full architecture document
/// ({"input", "modules"}) or the MLP shorthand
/// {"kind": "mlp", "input", "hidden", "output", "activation", "dropout", "softmax"}.
inline Network build_network(const Json& arch, std::uint64_t seed) {
  if (arch.contains("modules")) return network_from_architecture(arch, seed);
  detail::reject_unknown(arch, {"kind", "input", "hidden", "output", "activation", "dropout", "softmax"}, "architecture");
  if (detail::field<std::string>(arch, "kind", "mlp", "architecture") != "mlp") {
    throw ValidationError("only the mlp shorthand is supported", "architecture.kind");
  }
  const int input = detail::field<int>(arch, "input", 0, "architecture");
  const int output = detail::field<int>(arch, "output", 0, "architecture");
  const auto hidden = detail::field<std::vector<int>>(arch, "hidden", {}, "architecture");
  if (input < 1) throw ValidationError("must be positive", "architecture.input");
  if (output < 1) throw ValidationError("must be positive", "architecture.output");
  for (std::size_t i = 0; i < hidden.size(); ++i)
    if (hidden[i] < 1) throw ValidationError("must be positive", "architecture.hidden[" + std::to_string(i) + "]");
  ActivationFn fn;
  try {
    fn = activation_from_string(detail::field<std::string>(arch, "activation", "relu", "architecture"));
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), "architecture.activation");
  }
  const double p = detail::field<double>(arch, "dropout", 0.0, "architecture");
  if (p < 0.0 || p >= 1.0) throw ValidationError("must be in [0, 1)", "architecture.dropout");
  NetworkBuilder b(Shape{input, 1, 1}, seed);
  for (int h : hidden) {
    b.linear(h);
    b.activation(fn);
    if (p > 0.0) b.dropout(p);
  }
  b.linear(output);
  if (detail::field<bool>(arch, "softmax", false, "architecture")) b.softmax();
  return std::move(b).build();
}

inline ExperimentConfig parse_config(const Json& doc) {
  using detail::field;
  if (!doc.is_object()) throw ValidationError("config must be an object", "");
  detail::reject_unknown(doc,
                         {"kind", "architecture", "optimizer", "benchmark", "clone", "sweep", "steps", "batch_size", "loss",
                          "train_mode", "cadence", "probe_size", "seeds", "output_dir"},
                         "");
  ExperimentConfig c;
  c.raw = doc;
  if (!doc.contains("kind")) throw ValidationError("missing field", "kind");
  c.kind = experiment_from_string(field<std::string>(doc, "kind", "", ""));
  c.steps = field<long>(doc, "steps", c.steps, "");
  c.batch_size = field<int>(doc, "batch_size", c.kind == ExperimentKind::Bitflip ? 1 : c.batch_size, "");
  c.cadence = field<long>(doc, "cadence", c.cadence, "");
  c.probe_size = field<int>(doc, "probe_size", c.probe_size, "");
  c.output_dir = field<std::string>(doc, "output_dir", c.output_dir, "");
  if (c.steps < 0) throw ValidationError("must be non-negative", "steps");
  if (c.batch_size < 1) throw ValidationError("must be positive", "batch_size");
  if (c.cadence < 1) throw ValidationError("must be positive", "cadence");
  if (c.probe_size < 2) throw ValidationError("must be at least 2", "probe_size");
  if (doc.contains("loss")) {
    try {
      c.loss = loss_from_string(field<std::string>(doc, "loss", "", ""));
    } catch (const ValidationError& e) {
      throw ValidationError(e.what(), "loss");
    }
  }
  const std::string mode = field<std::string>(doc, "train_mode", "train", "");
  if (mode != "train" && mode != "eval") throw ValidationError("must be train or eval", "train_mode");
  c.train_mode = mode == "train" ? Mode::Train : Mode::Eval;
  if (doc.contains("seeds")) {
    c.seeds = field<std::vector<std::uint64_t>>(doc, "seeds", {}, "");
    if (c.seeds.empty()) throw ValidationError("must not be empty", "seeds");
  }

  if (doc.contains("optimizer")) {
    Json o = doc["optimizer"];
    if (!o.is_object()) throw ValidationError("must be an object", "optimizer");
    detail::reject_unknown(o,
                           {"kind", "inner", "lr", "momentum", "beta1", "beta2", "eps", "rms_decay", "sigma0", "lambda",
                            "weight_decay", "tie_clones", "seed", "rho", "tau_maturity", "r_replace", "utility", "switch_step"},
                           "optimizer");
    const std::string kind = field<std::string>(o, "kind", "sgd", "optimizer");
    c.use_cbp = kind == "cbp" || kind == "cbp-wrapper" || o.contains("switch_step");
    if (kind == "cbp" || kind == "cbp-wrapper") {
      o["kind"] = field<std::string>(o, "inner", "sgd", "optimizer");
    } else if (o.contains("inner")) {
      throw ValidationError("only valid for the cbp kind", "optimizer.inner");
    }
    c.cbp_start = field<long>(o, "switch_step", 0, "optimizer");
    if (c.cbp_start < 0) throw ValidationError("must be non-negative", "optimizer.switch_step");
    for (const char* k : {"inner", "rho", "tau_maturity", "r_replace", "utility", "switch_step"}) o.erase(k);
    c.optimizer = optimizer_from_json(o, "optimizer");
    c.cbp = cbp_from_json(doc["optimizer"], "optimizer");
  }

  const Json bench = doc.value("benchmark", Json::object());
  if (!bench.is_object()) throw ValidationError("must be an object", "benchmark");
  if (c.kind == ExperimentKind::Bitflip) {
    detail::reject_unknown(bench, {"kind", "m", "f", "beta", "T", "target_width"}, "benchmark");
    c.bitflip = bitflip_from_json(bench, "benchmark");
  } else if (c.kind == ExperimentKind::Continual) {
    detail::reject_unknown(bench, {"kind", "n_tasks", "classes_per_task", "d", "samples_per_class", "separation", "steps_per_task",
                                   "reset_head"},
                           "benchmark");
    c.tasks = tasks_from_json(bench, "benchmark");
    c.steps_per_task = field<long>(bench, "steps_per_task", c.steps_per_task, "benchmark");
    if (c.steps_per_task < 1) throw ValidationError("must be positive", "benchmark.steps_per_task");
    c.reset_head = field<bool>(bench, "reset_head", c.reset_head, "benchmark");
    c.steps = c.steps_per_task * c.tasks.n_tasks;
    if (!doc.contains("loss")) c.loss = LossKind::CrossEntropy;
  } else if (c.kind == ExperimentKind::Cloning) {
    detail::reject_unknown(bench, {"kind", "teacher_width"}, "benchmark");
    const std::string bk = field<std::string>(bench, "kind", "random-regression", "benchmark");
    if (bk != "random-regression" && bk != "teacher") throw ValidationError("must be random-regression or teacher", "benchmark.kind");
    c.clone.teacher = bk == "teacher";
    c.clone.teacher_width = field<int>(bench, "teacher_width", c.clone.teacher_width, "benchmark");
    if (c.clone.teacher_width < 1) throw ValidationError("must be positive", "benchmark.teacher_width");
  }

  if (doc.contains("clone")) {
    const Json& cl = doc["clone"];
    detail::reject_unknown(cl, {"alpha", "redistribute", "escape_threshold"}, "clone");
    c.clone.alpha = field<int>(cl, "alpha", c.clone.alpha, "clone");
    c.clone.redistribute = field<double>(cl, "redistribute", c.clone.redistribute, "clone");
    c.clone.escape_threshold = field<double>(cl, "escape_threshold", c.clone.escape_threshold, "clone");
    if (c.clone.alpha < 1) throw ValidationError("must be positive", "clone.alpha");
    if (c.clone.redistribute < 0.0) throw ValidationError("must be non-negative", "clone.redistribute");
  }

  if (doc.contains("sweep")) {
    const Json& s = doc["sweep"];
    detail::reject_unknown(s, {"activations", "a_grid", "b_grid", "truncation", "quad_order"}, "sweep");
    if (s.contains("activations")) {
      c.sweep.activations.clear();
      const auto names = field<std::vector<std::string>>(s, "activations", {}, "sweep");
      for (std::size_t i = 0; i < names.size(); ++i) {
        try {
          c.sweep.activations.push_back(activation_from_string(names[i]));
        } catch (const ValidationError& e) {
          throw ValidationError(e.what(), "sweep.activations[" + std::to_string(i) + "]");
        }
      }
    }
    c.sweep.a_grid = field<std::vector<double>>(s, "a_grid", c.sweep.a_grid, "sweep");
    c.sweep.b_grid = field<std::vector<double>>(s, "b_grid", c.sweep.b_grid, "sweep");
    c.sweep.kernel.truncation = field<int>(s, "truncation", c.sweep.kernel.truncation, "sweep");
    c.sweep.kernel.quad_order = field<int>(s, "quad_order", c.sweep.kernel.quad_order, "sweep");
    for (double a : c.sweep.a_grid)
      if (!(a > 0.0)) throw ValidationError("gains must be positive", "sweep.a_grid");
    if (c.sweep.kernel.truncation < 1) throw ValidationError("must be positive", "sweep.truncation");
  }

  const bool needs_net = c.kind == ExperimentKind::Continual || c.kind == ExperimentKind::Cloning || c.kind == ExperimentKind::Bitflip;
  if (needs_net) {
    if (!doc.contains("architecture")) throw ValidationError("missing field", "architecture");
    c.architecture = doc["architecture"];
    const Network probe = build_network(c.architecture, 0);
    const int in = probe.input_shape().size();
    const int out = probe.modules().back().out_shape.size();
    if (c.kind == ExperimentKind::Bitflip) {
      if (in != c.bitflip.m + 1) throw ValidationError("input must be m + 1 for the bit-flipping stream", "architecture.input");
      if (out != 1) throw ValidationError("output must be 1 for the bit-flipping stream", "architecture.output");
      if (c.use_cbp) cbp_init(probe, c.cbp);
    } else if (c.kind == ExperimentKind::Continual) {
      if (in != c.tasks.dim) throw ValidationError("input must equal benchmark.d", "architecture.input");
      if (out != c.tasks.classes_per_task) throw ValidationError("output must equal benchmark.classes_per_task", "architecture.output");
      if (c.use_cbp) cbp_init(probe, c.cbp);
    } else if (c.use_cbp) {
      throw ValidationError("CBP is not available for cloning runs", "optimizer.kind");
    }
  }
  return c;
}

/// JSON document from a file; // and /* */ comments are allowed.
inline Json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file", path);
  Json doc;
  try {
    doc = Json::parse(in, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ValidationError(e.what(), path);
  }
  return doc;
}

/// Parses the file and reports every problem as a ValidationError whose
/// where() is the offending field path.
inline ExperimentConfig load_config(const std::string& path) { return parse_config(load_json(path)); }

}  // namespace lop
