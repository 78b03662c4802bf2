#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>

#include "lop/harness/aggregate.hpp"
#include "lop/harness/config.hpp"
#include "lop/harness/csv.hpp"
#include "lop/harness/plot.hpp"
#include "lop/harness/runlog.hpp"
#include "lop/harness/runner.hpp"

namespace lop {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lop_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string where_of(const Json& doc) {
  try {
    parse_config(doc);
  } catch (const ValidationError& e) {
    return e.where();
  }
  return "<valid>";
}

Json cloning_doc() {
  return Json::parse(R"({
    "kind": "cloning",
    "architecture": {"kind": "mlp", "input": 4, "hidden": [8, 6], "output": 2, "activation": "tanh"},
    "optimizer": {"kind": "sgd", "lr": 0.05},
    "steps": 40, "cadence": 10, "batch_size": 8, "probe_size": 16, "seeds": [3]
  })");
}

Json bitflip_doc() {
  return Json::parse(R"({
    "kind": "bitflip",
    "architecture": {"kind": "mlp", "input": 9, "hidden": [10], "output": 1},
    "optimizer": {"kind": "cbp", "inner": "sgd", "lr": 0.01, "switch_step": 50, "tau_maturity": 5, "r_replace": 0.05},
    "benchmark": {"m": 8, "f": 4, "beta": 0.6, "T": 30, "target_width": 12},
    "steps": 100, "cadence": 10, "probe_size": 32, "seeds": [0]
  })");
}

std::vector<Json> rows_of(const Json& doc, std::uint64_t seed) { return run_experiment(parse_config(doc), seed).rows; }

TEST(Config, ErrorsCarryFieldPaths) {
  Json d = cloning_doc();
  d["optimizer"]["lr"] = -1.0;
  EXPECT_EQ(where_of(d), "optimizer.lr");
  d = cloning_doc();
  d["architecture"]["hidden"] = Json::array({8, 0});
  EXPECT_EQ(where_of(d), "architecture.hidden[1]");
  d = cloning_doc();
  d["typo"] = 1;
  EXPECT_EQ(where_of(d), "typo");
  d = cloning_doc();
  d["seeds"] = Json::array();
  EXPECT_EQ(where_of(d), "seeds");
  d = cloning_doc();
  d.erase("architecture");
  EXPECT_EQ(where_of(d), "architecture");
  d = bitflip_doc();
  d["architecture"]["input"] = 8;
  EXPECT_EQ(where_of(d), "architecture.input");
  d = bitflip_doc();
  d["benchmark"]["f"] = 9;
  EXPECT_EQ(where_of(d), "benchmark.f");
  EXPECT_EQ(where_of(cloning_doc()), "<valid>");
  EXPECT_EQ(where_of(bitflip_doc()), "<valid>");
}

TEST(Config, Defaults) {
  const ExperimentConfig c = parse_config(Json{{"kind", "kernel-sweep"}});
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(c.cadence, 100);
  const ExperimentConfig b = parse_config(bitflip_doc());
  EXPECT_TRUE(b.use_cbp);
  EXPECT_EQ(b.cbp_start, 50);
  EXPECT_EQ(b.batch_size, 1);
}

TEST(RunLog, HashIgnoresSeedsAndOutput) {
  Json a = cloning_doc(), b = cloning_doc();
  b["seeds"] = Json::array({7, 8});
  b["output_dir"] = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b["steps"] = 41;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(RunLog, HeaderOnceAndIncreasingSteps) {
  const fs::path dir = scratch("runlog");
  const std::string path = (dir / "a" / "log.jsonl").string();
  {
    RunLogWriter w(path, cloning_doc(), 3);
    w.write(Json{{"step", 0}, {"x", 1.0}});
    w.write(Json{{"step", 5}, {"x", 2.0}});
    EXPECT_THROW(w.write(Json{{"step", 5}}), Error);
  }
  const RunLog log = read_runlog(path);
  EXPECT_EQ(log.header["seed"], 3);
  EXPECT_EQ(log.header["config_hash"], config_hash(cloning_doc()));
  ASSERT_EQ(log.rows.size(), 2u);
  EXPECT_EQ(log.rows[1]["x"], 2.0);

  std::ofstream(dir / "bad.jsonl") << "{\"step\":1}\n";
  EXPECT_THROW(read_runlog((dir / "bad.jsonl").string()), ValidationError);
  std::ofstream(dir / "two.jsonl") << run_header(Json::object(), 0).dump() << '\n' << run_header(Json::object(), 0).dump() << '\n';
  EXPECT_THROW(read_runlog((dir / "two.jsonl").string()), ValidationError);
}

TEST(Runner, SameSeedSameRows) {
  const auto a = rows_of(cloning_doc(), 3), b = rows_of(cloning_doc(), 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].dump(), b[i].dump());
  const auto c = rows_of(bitflip_doc(), 1), d = rows_of(bitflip_doc(), 1);
  ASSERT_EQ(c.size(), d.size());
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(c[i].dump(), d[i].dump());
  EXPECT_NE(rows_of(bitflip_doc(), 2).back().dump(), c.back().dump());
}

TEST(Runner, CloningReportsR2EveryCadenceStep) {
  const auto rows = rows_of(cloning_doc(), 3);
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i]["step"], static_cast<long>(10 * i));
    ASSERT_TRUE(rows[i].contains("r2_forward"));
    ASSERT_TRUE(rows[i].contains("r2_backward"));
    EXPECT_GE(rows[i]["r2_forward"].get<double>(), 1.0 - 1e-10);
    EXPECT_LT(rows[i]["residual_bc"].get<double>(), 1e-8);
  }
}

TEST(Runner, BitflipPhaseTags) {
  const auto rows = rows_of(bitflip_doc(), 0);
  ASSERT_EQ(rows.size(), 10u);
  long replaced = 0;
  for (const auto& r : rows) {
    const long step = r["step"];
    EXPECT_EQ(r["phase"], step <= 50 ? "sgd" : "cbp") << step;
    if (step <= 50) {
      EXPECT_EQ(r["replacements"], 0);
    }
    replaced += r["replacements"].get<long>();
    EXPECT_TRUE(r.contains("eff_rank"));
  }
  EXPECT_GT(replaced, 0);
}

TEST(Runner, ContinualResetsHeadPerTask) {
  const Json doc = Json::parse(R"({
    "kind": "continual",
    "architecture": {"kind": "mlp", "input": 4, "hidden": [8], "output": 2, "softmax": true},
    "optimizer": {"kind": "sgd", "lr": 0.1},
    "benchmark": {"n_tasks": 3, "classes_per_task": 2, "d": 4, "samples_per_class": 20, "separation": 4.0, "steps_per_task": 30},
    "cadence": 10, "batch_size": 8, "probe_size": 16
  })");
  const auto rows = rows_of(doc, 0);
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[2]["task"], 0);
  EXPECT_EQ(rows[3]["task"], 1);
  EXPECT_EQ(rows.back()["step"], 90);
  for (const auto& r : rows) EXPECT_GE(r["accuracy"].get<double>(), 0.0);
}

TEST(Runner, KernelSweepRows) {
  const auto rows = run_kernel_sweep(parse_config(Json{{"kind", "kernel-sweep"}})).rows;
  ASSERT_EQ(rows.size(), 27u);
  for (const char* k : {"a", "b", "kappa", "alpha", "r_star", "frozen_proxy"}) EXPECT_TRUE(rows[0].contains(k)) << k;
}

TEST(Runner, VerifySuitePasses) {
  const RunResult r = run_verify(0);
  for (const auto& row : r.rows) EXPECT_TRUE(row["pass"].get<bool>()) << row.dump();
  EXPECT_TRUE(r.summary["pass"].get<bool>());
}

TEST(Runner, DivergenceAbortsWithPartialLog) {
  const fs::path dir = scratch("nan");
  setenv("LOP_OUTPUT_ROOT", dir.c_str(), 1);
  Json doc = cloning_doc();
  doc["optimizer"]["lr"] = 1e150;
  doc["steps"] = 200;
  doc["cadence"] = 1;
  const ExperimentConfig cfg = parse_config(doc);
  EXPECT_THROW(run_all(cfg), Error);
  const RunLog log = read_runlog(log_path(cfg, 3).string());
  unsetenv("LOP_OUTPUT_ROOT");
  EXPECT_FALSE(log.rows.empty());
  EXPECT_LT(log.rows.size(), 201u);
}

TEST(Runner, ParallelSeedsMatchSerial) {
  const fs::path dir = scratch("jobs");
  setenv("LOP_OUTPUT_ROOT", dir.c_str(), 1);
  Json doc = cloning_doc();
  doc["seeds"] = Json::array({0, 1, 2});
  doc["output_dir"] = "serial";
  const auto serial = run_all(parse_config(doc), 1);
  doc["output_dir"] = "parallel";
  const auto parallel = run_all(parse_config(doc), 3);
  unsetenv("LOP_OUTPUT_ROOT");
  ASSERT_EQ(serial.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const RunLog a = read_runlog(serial[i]), b = read_runlog(parallel[i]);
    EXPECT_EQ(Json(a.rows).dump(), Json(b.rows).dump());
  }
}

RunLog fake_log(std::uint64_t seed, const std::vector<std::pair<long, double>>& points, const Json& config = Json{{"k", 1}}) {
  RunLog log;
  log.header = run_header(config, seed)["header"];
  for (const auto& [s, v] : points) log.rows.push_back(Json{{"step", s}, {"m", v}, {"phase", "sgd"}});
  return log;
}

TEST(Aggregate, WindowBoundaries) {
  EXPECT_EQ(window_index(0, 1000), 0);
  EXPECT_EQ(window_index(1, 1000), 0);
  EXPECT_EQ(window_index(1000, 1000), 0);
  EXPECT_EQ(window_index(1001, 1000), 1);
  const CsvTable t = aggregate_logs({fake_log(0, {{500, 1.0}, {1000, 3.0}, {1001, 10.0}, {2000, 20.0}})});
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.numbers("step"), (std::vector<double>{1000, 2000}));
  EXPECT_EQ(t.numbers("m_mean"), (std::vector<double>{2.0, 15.0}));
}

TEST(Aggregate, SingleSeedHasZeroStd) {
  const CsvTable t = aggregate_logs({fake_log(0, {{100, 0.3}, {1500, 0.7}, {2500, -2.0}})});
  for (double s : t.numbers("m_std")) EXPECT_EQ(s, 0.0);
  EXPECT_EQ(t.rows[0][static_cast<std::size_t>(t.column("phase"))], "sgd");
}

TEST(Aggregate, ConstantMetricAcrossSeeds) {
  std::vector<RunLog> logs;
  for (std::uint64_t s = 0; s < 5; ++s) logs.push_back(fake_log(s, {{100, 0.25}, {900, 0.25}, {1900, 0.25}}));
  const CsvTable t = aggregate_logs(logs);
  for (double m : t.numbers("m_mean")) EXPECT_EQ(m, 0.25);
  for (double s : t.numbers("m_std")) EXPECT_EQ(s, 0.0);
  EXPECT_EQ(t.numbers("n_seeds"), (std::vector<double>{5, 5}));
}

TEST(Aggregate, PopulationStdAcrossSeeds) {
  const CsvTable t = aggregate_logs({fake_log(0, {{10, 1.0}}), fake_log(1, {{10, 3.0}})});
  EXPECT_EQ(t.numbers("m_mean")[0], 2.0);
  EXPECT_EQ(t.numbers("m_std")[0], 1.0);
}

TEST(Aggregate, RejectsMixedConfigs) {
  EXPECT_THROW(aggregate_logs({fake_log(0, {{1, 1.0}}), fake_log(1, {{1, 1.0}}, Json{{"k", 2}})}), ValidationError);
  EXPECT_THROW(aggregate_logs({}), ValidationError);
}

TEST(Csv, RoundTrip) {
  const CsvTable t = rows_to_table({Json{{"step", 1}, {"a", 0.1}}, Json{{"step", 2}, {"b", "x"}}});
  EXPECT_EQ(t.columns, (std::vector<std::string>{"step", "a", "b"}));
  const CsvTable u = parse_csv(to_csv(t));
  EXPECT_EQ(u.rows, t.rows);
  EXPECT_EQ(u.numbers("a")[0], 0.1);
  EXPECT_TRUE(std::isnan(u.numbers("a")[1]));
  EXPECT_THROW(u.numbers("zzz"), ValidationError);
}

int count(const std::string& s, const std::string& what) {
  int n = 0;
  for (std::size_t p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
  return n;
}

TEST(Plot, EmptySeriesIsAnError) {
  CsvTable t = parse_csv("step,m\n1,2\n");
  PlotSpec spec;
  EXPECT_THROW(plot_svg(t, spec), ValidationError);
  spec.series = {"nope"};
  EXPECT_THROW(plot_svg(t, spec), ValidationError);
  spec.x = "nope";
  spec.series = {"m"};
  EXPECT_THROW(plot_svg(t, spec), ValidationError);
}

TEST(Plot, OneSeriesOnePolyline) {
  const CsvTable t = parse_csv("step,m_mean,m_std\n1000,1,0.1\n2000,2,0.2\n");
  PlotSpec spec;
  spec.series = {"m"};
  const std::string svg = plot_svg(t, spec);
  EXPECT_EQ(count(svg, "<polyline"), 1);
  EXPECT_EQ(count(svg, "<polygon"), 1);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  spec.series = {"m", "m"};
  EXPECT_EQ(count(plot_svg(t, spec), "<polyline"), 2);
}

// Confinement keeps R^2 at 1 under SGD, so the plotted band is flat: every
// polyline vertex shares one y coordinate.
TEST(Plot, ConfinementR2BandIsFlat) {
  Json doc = cloning_doc();
  doc["steps"] = 200;
  doc["cadence"] = 20;
  std::vector<RunLog> logs;
  for (std::uint64_t s = 0; s < 3; ++s) logs.push_back(RunLog{run_header(doc, s)["header"], rows_of(doc, s)});
  const CsvTable t = aggregate_logs(logs, 20);
  PlotSpec spec;
  spec.series = {"r2_forward"};
  const std::string svg = plot_svg(t, spec);
  const std::smatch m = [&] {
    std::smatch mm;
    std::regex_search(svg, mm, std::regex("<polyline[^>]*points=\"([^\"]*)\""));
    return mm;
  }();
  ASSERT_EQ(m.size(), 2u);
  const std::string pts = m[1];
  std::set<std::string> ys;
  std::regex pt("[0-9.]+,([0-9.]+)");
  for (auto it = std::sregex_iterator(pts.begin(), pts.end(), pt); it != std::sregex_iterator(); ++it) ys.insert((*it)[1]);
  EXPECT_EQ(ys.size(), 1u);
  for (double s : t.numbers("r2_forward_std")) EXPECT_LT(s, 1e-10);
}

}  // namespace
}  // namespace lop
