#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lop/core/common.hpp"
#include "lop/core/json.hpp"

namespace lop {

/// Table of string cells; numeric columns are parsed on demand.
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }

  bool has(const std::string& name) const { return column(name) >= 0; }

  /// Values of a column; empty cells and non-numbers become NaN.
  std::vector<double> numbers(const std::string& name) const {
    const int c = column(name);
    if (c < 0) throw ValidationError("missing column", name);
    std::vector<double> v;
    for (const auto& r : rows) {
      const std::string& cell = r[static_cast<std::size_t>(c)];
      char* end = nullptr;
      const double x = std::strtod(cell.c_str(), &end);
      v.push_back(cell.empty() || end != cell.c_str() + cell.size() ? std::numeric_limits<double>::quiet_NaN() : x);
    }
    return v;
  }
};

/// Shortest text that reads back to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string csv_cell(const Json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) return format_number(v.get<double>());
  if (v.is_number() || v.is_boolean()) return v.dump();
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

/// Cells never contain commas here (keys and numbers), so no quoting.
inline std::string to_csv(const CsvTable& t) {
  std::ostringstream out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
  return out.str();
}

inline CsvTable parse_csv(const std::string& text, const std::string& where = "csv") {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream s(l);
    while (std::getline(s, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw ValidationError("empty CSV", where);
  t.columns = split(line);
  long n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.columns.size()) throw ValidationError("row " + std::to_string(n) + " has the wrong number of cells", where);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open CSV", path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write file", path);
  out << text;
}

/// Flat JSON rows as a table: one column per key seen, in first-seen order
/// (step first), blank where a row lacks the key.
inline CsvTable rows_to_table(const std::vector<Json>& rows) {
  CsvTable t;
  std::map<std::string, int> index;
  auto add = [&](const std::string& k) {
    if (index.emplace(k, static_cast<int>(t.columns.size())).second) t.columns.push_back(k);
  };
  add("step");
  for (const auto& r : rows)
    for (auto it = r.begin(); it != r.end(); ++it) add(it.key());
  for (const auto& r : rows) {
    std::vector<std::string> cells(t.columns.size());
    for (auto it = r.begin(); it != r.end(); ++it) cells[static_cast<std::size_t>(index[it.key()])] = csv_cell(it.value());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace lop
