// Short bit-flipping run through the experiment runner: SGD for the first
// half, continual backprop for the second. Prints windowed averages.

#include <cstdio>

#include "lop/lop.hpp"

using namespace lop;

int main() {
  const ExperimentConfig cfg = parse_config(Json::parse(R"({
    "kind": "bitflip",
    "architecture": {"kind": "mlp", "input": 21, "hidden": [20], "output": 1},
    "optimizer": {"kind": "cbp", "inner": "sgd", "lr": 0.01, "switch_step": 40000},
    "benchmark": {"m": 20, "f": 15, "beta": 0.7, "T": 5000},
    "steps": 80000, "cadence": 100
  })"));
  const RunResult r = run_experiment(cfg, 0);
  const CsvTable t = aggregate_logs({RunLog{run_header(cfg.raw, 0)["header"], r.rows}}, 5000);
  const auto loss = t.numbers("loss_mean"), rank = t.numbers("eff_rank_mean"), dead = t.numbers("dead_frac_mean");
  std::printf("%7s %6s %8s %8s %6s\n", "step", "phase", "loss", "eff_rank", "dead");
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    std::printf("%7s %6s %8.4f %8.3f %6.3f\n", t.rows[i][0].c_str(), t.rows[i][1].c_str(), loss[i], rank[i], dead[i]);
  std::printf("units replaced: %s\n", r.summary["replacements"].dump().c_str());
}
