#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lop/harness/csv.hpp"
#include "lop/harness/runlog.hpp"

namespace lop {

/// Window of a step: steps 1..W fall in window 0, W+1..2W in window 1, and
/// step 0 joins window 0. Windows are labelled by their last step (k+1)W.
inline long window_index(long step, long width) { return step <= 0 ? 0 : (step - 1) / width; }

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population standard deviation, so one value has std 0.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

/// Per-window summary across seeds. Each seed's numeric fields are averaged
/// within a window first; the table then holds <metric>_mean and
/// <metric>_std across the seeds that reported the metric in that window.
/// A "phase" column carries the phase of the window's last row.
inline CsvTable aggregate_logs(const std::vector<RunLog>& logs, long width = 1000) {
  if (logs.empty()) throw ValidationError("no logs to aggregate", "logs");
  if (width < 1) throw ValidationError("window width must be positive", "window");
  const std::string hash = logs.front().header.at("config_hash").get<std::string>();
  for (const auto& l : logs)
    if (l.header.at("config_hash").get<std::string>() != hash)
      throw ValidationError("logs come from different configs", "seed " + l.header.at("seed").dump());

  // window -> metric -> per-seed window means
  std::map<long, std::map<std::string, std::vector<double>>> per_window;
  std::map<long, std::string> phase;
  std::vector<std::string> metrics;
  std::set<std::string> seen;
  for (const auto& log : logs) {
    std::map<long, std::map<std::string, std::pair<double, long>>> sums;
    for (const auto& row : log.rows) {
      const long w = window_index(row.at("step").get<long>(), width);
      if (row.contains("phase") && row["phase"].is_string()) phase[w] = row["phase"].get<std::string>();
      for (auto it = row.begin(); it != row.end(); ++it) {
        if (it.key() == "step" || !it.value().is_number()) continue;
        if (seen.insert(it.key()).second) metrics.push_back(it.key());
        auto& s = sums[w][it.key()];
        s.first += it.value().get<double>();
        ++s.second;
      }
    }
    for (const auto& [w, by_metric] : sums)
      for (const auto& [name, s] : by_metric) per_window[w][name].push_back(s.first / static_cast<double>(s.second));
  }

  CsvTable t;
  t.columns.push_back("step");
  if (!phase.empty()) t.columns.push_back("phase");
  t.columns.push_back("n_seeds");
  for (const auto& m : metrics) {
    t.columns.push_back(m + "_mean");
    t.columns.push_back(m + "_std");
  }
  for (const auto& [w, by_metric] : per_window) {
    std::vector<std::string> row{std::to_string((w + 1) * width)};
    if (!phase.empty()) row.push_back(phase.count(w) ? phase[w] : "");
    std::size_t n = 0;
    for (const auto& [name, v] : by_metric) n = std::max(n, v.size());
    row.push_back(std::to_string(n));
    for (const auto& m : metrics) {
      auto it = by_metric.find(m);
      if (it == by_metric.end()) {
        row.insert(row.end(), {"", ""});
        continue;
      }
      const MeanStd ms = mean_std(it->second);
      row.push_back(format_number(ms.mean));
      row.push_back(format_number(ms.std));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace lop
