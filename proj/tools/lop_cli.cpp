// Command-line front end. Exit codes: 0 success, 1 invalid input (config,
// flags, files), 2 runtime failure (divergence, failed verification, I/O).
// Relative output paths resolve against $LOP_OUTPUT_ROOT (default ".").

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lop/harness/aggregate.hpp"
#include "lop/harness/config.hpp"
#include "lop/harness/csv.hpp"
#include "lop/harness/plot.hpp"
#include "lop/harness/runlog.hpp"
#include "lop/harness/runner.hpp"
#include "lop/kernel/kernel.hpp"

namespace fs = std::filesystem;
using namespace lop;

namespace {

std::string output_path(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? p : (output_root() / path).string();
}

void write_output(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  const std::string path = output_path(out);
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_text(path, text);
  std::cout << path << '\n';
}

struct RunFlags {
  std::string config;
  int jobs = 1;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
};

void add_run_flags(CLI::App* sub, RunFlags& f, bool config_required) {
  auto* opt = sub->add_option("config", f.config, "Experiment config (JSON, comments allowed)");
  if (config_required) opt->required();
  sub->add_option("--jobs,-j", f.jobs, "Seeds run in parallel")->check(CLI::PositiveNumber);
  sub->add_option("--seeds", f.seeds, "Override the config's seed list");
  sub->add_option("--output-dir", f.output_dir, "Override the config's output directory");
}

int run_config(Json doc, const RunFlags& f, ExperimentKind expect, bool check_kind) {
  if (!f.seeds.empty()) doc["seeds"] = f.seeds;
  if (!f.output_dir.empty()) doc["output_dir"] = f.output_dir;
  const ExperimentConfig cfg = parse_config(doc);
  if (check_kind && cfg.kind != expect) throw ValidationError("this subcommand needs kind \"" + to_string(expect) + "\"", "kind");
  bool ok = true;
  run_all(cfg, f.jobs, [&](std::uint64_t seed, const RunResult& r) {
    std::cout << "seed " << seed << ": " << r.rows.size() << " rows -> " << log_path(cfg, seed).string();
    if (!r.summary.empty()) std::cout << ' ' << r.summary.dump();
    std::cout << '\n';
    if (r.summary.contains("pass") && !r.summary["pass"].get<bool>()) ok = false;
  });
  return ok ? 0 : 2;
}

Json bitflip_default_doc() {
  return Json::parse(R"({
    "kind": "bitflip",
    "architecture": {"kind": "mlp", "input": 21, "hidden": [20], "output": 1, "activation": "relu"},
    "optimizer": {"kind": "cbp", "inner": "sgd", "lr": 0.01, "switch_step": 100000},
    "benchmark": {"m": 20, "f": 15, "beta": 0.7, "T": 10000, "target_width": 100},
    "steps": 200000,
    "output_dir": "bitflip"
  })");
}

std::vector<std::string> expand_logs(const std::vector<std::string>& inputs) {
  std::vector<std::string> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".jsonl") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      if (found.empty()) throw ValidationError("no .jsonl logs in directory", in);
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(in);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loss-of-plasticity experiments: cloning confinement, bit-flipping, kernels, diagnostics"};
  app.require_subcommand(1);
  std::function<int()> action;

  RunFlags train_f;
  auto* train = app.add_subcommand("train", "Run any experiment config, one JSONL log per seed");
  add_run_flags(train, train_f, true);
  train->callback([&] { action = [&] { return run_config(load_json(train_f.config), train_f, ExperimentKind::Continual, false); }; });

  RunFlags clone_f;
  int alpha = 0;
  double redistribute = -1.0;
  auto* clone = app.add_subcommand("clone", "Train a base network and its clone in lockstep and log confinement");
  add_run_flags(clone, clone_f, true);
  clone->add_option("--alpha", alpha, "Cloning factor override")->check(CLI::PositiveNumber);
  clone->add_option("--redistribute", redistribute, "Within-block redistribution amplitude override");
  clone->callback([&] {
    action = [&] {
      Json doc = load_json(clone_f.config);
      if (alpha > 0) doc["clone"]["alpha"] = alpha;
      if (redistribute >= 0.0) doc["clone"]["redistribute"] = redistribute;
      return run_config(doc, clone_f, ExperimentKind::Cloning, true);
    };
  });

  std::uint64_t verify_seed = 0;
  bool verify_json = false;
  auto* verify = app.add_subcommand("verify", "Gradient, certificate, cloning, confinement and kernel oracles");
  verify->add_option("--seed", verify_seed, "Seed for the random problems");
  verify->add_flag("--json", verify_json, "Print rows as JSON lines");
  verify->callback([&] {
    action = [&] {
      const RunResult r = run_verify(verify_seed, [&](const Json& row) {
        if (verify_json) {
          std::cout << row.dump() << '\n';
        } else {
          std::printf("%-4s %-36s value=%-12.4g tol=%g\n", row["pass"].get<bool>() ? "ok" : "FAIL",
                      row["check"].get<std::string>().c_str(), row["value"].get<double>(), row["tolerance"].get<double>());
        }
      });
      return r.summary["pass"].get<bool>() ? 0 : 2;
    };
  });

  RunFlags bit_f;
  long bit_steps = 0, bit_switch = -1;
  auto* bitflip = app.add_subcommand("bitflip", "Online bit-flipping regression, SGD then CBP");
  add_run_flags(bitflip, bit_f, false);
  bitflip->add_option("--steps", bit_steps, "Total samples")->check(CLI::PositiveNumber);
  bitflip->add_option("--switch", bit_switch, "Step after which CBP is enabled")->check(CLI::NonNegativeNumber);
  bitflip->callback([&] {
    action = [&] {
      Json doc = bit_f.config.empty() ? bitflip_default_doc() : load_json(bit_f.config);
      if (bit_steps > 0) doc["steps"] = bit_steps;
      if (bit_switch >= 0) doc["optimizer"]["switch_step"] = bit_switch;
      return run_config(doc, bit_f, ExperimentKind::Bitflip, true);
    };
  });

  std::string k_act = "relu", k_out, k_kernels;
  std::vector<double> k_a{0.5, 1.0, 2.0}, k_b{-1.0, 0.0, 1.0};
  int k_trunc = KernelOptions{}.truncation, k_quad = KernelOptions{}.quad_order;
  auto* kernel = app.add_subcommand("kernel", "Decorrelation sweep over gain and bias grids, as CSV");
  kernel->add_option("--activation", k_act, "relu, tanh, gelu, prelu or identity");
  kernel->add_option("--a", k_a, "Gain grid")->delimiter(',');
  kernel->add_option("--b", k_b, "Bias grid")->delimiter(',');
  kernel->add_option("--truncation", k_trunc, "Hermite truncation order")->check(CLI::PositiveNumber);
  kernel->add_option("--quad-order", k_quad, "Quadrature order")->check(CLI::PositiveNumber);
  kernel->add_option("--out,-o", k_out, "CSV path (stdout when omitted)");
  kernel->add_option("--kernels", k_kernels, "Also write every fitted kernel as a JSON array");
  kernel->callback([&] {
    action = [&] {
      ActivationFn fn;
      try {
        fn = activation_from_string(k_act);
      } catch (const ValidationError& e) {
        throw ValidationError(e.what(), "--activation");
      }
      for (double a : k_a)
        if (!(a > 0.0)) throw ValidationError("gains must be positive", "--a");
      KernelOptions opt;
      opt.truncation = k_trunc;
      opt.quad_order = k_quad;
      CsvTable t;
      t.columns = {"a", "b", "kappa", "alpha", "r_star", "frozen_proxy"};
      for (const RegimeRow& r : regime_sweep(fn, k_a, k_b, opt))
        t.rows.push_back({format_number(r.a), format_number(r.b), format_number(r.kappa), format_number(r.alpha),
                          format_number(r.r_star), format_number(r.frozen_proxy)});
      if (!k_kernels.empty()) {
        Json all = Json::array();
        for (double a : k_a)
          for (double b : k_b) all.push_back(kernel_to_json(make_kernel(ScalarActivation{fn, a, b, 0.25}, opt)));
        write_output(k_kernels, all.dump(2) + "\n");
      }
      write_output(k_out, to_csv(t));
      return 0;
    };
  });

  std::vector<std::string> agg_logs;
  long agg_window = 1000;
  std::string agg_out;
  auto* aggregate = app.add_subcommand("aggregate", "Windowed mean and std across seeds as CSV");
  aggregate->add_option("logs", agg_logs, "Run logs or directories of logs")->required();
  aggregate->add_option("--window", agg_window, "Window width in steps")->check(CLI::PositiveNumber);
  aggregate->add_option("--out,-o", agg_out, "CSV path (stdout when omitted)");
  aggregate->callback([&] {
    action = [&] {
      std::vector<RunLog> logs;
      for (const auto& p : expand_logs(agg_logs)) logs.push_back(read_runlog(p));
      write_output(agg_out, to_csv(aggregate_logs(logs, agg_window)));
      return 0;
    };
  });

  std::string plot_csv, plot_spec_path, plot_out = "plot.svg";
  PlotSpec spec;
  auto* plot = app.add_subcommand("plot", "SVG line plot with std bands from a summary CSV");
  plot->add_option("csv", plot_csv, "Summary CSV from aggregate")->required();
  plot->add_option("--spec", plot_spec_path, "JSON spec {x, y, series, title}; flags override it");
  plot->add_option("--x", spec.x, "Column for the horizontal axis");
  plot->add_option("--y", spec.y, "Vertical axis label");
  plot->add_option("--series", spec.series, "Metrics to draw")->delimiter(',');
  plot->add_option("--title", spec.title, "Plot title");
  plot->add_option("--out,-o", plot_out, "SVG path");
  plot->callback([&] {
    action = [&] {
      PlotSpec s = spec;
      if (!plot_spec_path.empty()) {
        s = plot_spec_from_json(load_json(plot_spec_path));
        if (plot->count("--x")) s.x = spec.x;
        if (plot->count("--y")) s.y = spec.y;
        if (plot->count("--series")) s.series = spec.series;
        if (plot->count("--title")) s.title = spec.title;
      }
      write_output(plot_out, plot_svg(read_csv(plot_csv), s));
      return 0;
    };
  });

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config and print its kind and hash");
  validate->add_option("config", validate_path, "Experiment config")->required();
  validate->callback([&] {
    action = [&] {
      const Json doc = load_json(validate_path);
      const ExperimentConfig cfg = parse_config(doc);
      std::cout << "ok " << to_string(cfg.kind) << " config_hash=" << config_hash(doc) << " seeds=" << cfg.seeds.size() << '\n';
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    return action();
  } catch (const ValidationError& e) {
    std::cerr << "invalid: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
