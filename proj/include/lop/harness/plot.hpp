#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lop/harness/csv.hpp"

namespace lop {

struct PlotSpec {
  std::string x = "step";
  std::string y;  // axis label
  std::vector<std::string> series;
  std::string title;
  int width = 640;
  int height = 400;
};

inline PlotSpec plot_spec_from_json(const Json& j) {
  PlotSpec s;
  if (!j.is_object()) throw ValidationError("plot spec must be an object", "spec");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "x" && it.key() != "y" && it.key() != "series" && it.key() != "title" && it.key() != "width" &&
        it.key() != "height")
      throw ValidationError("unknown field", "spec." + it.key());
  try {
    s.x = j.value("x", s.x);
    s.y = j.value("y", s.y);
    s.title = j.value("title", s.title);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    if (j.contains("series")) s.series = j["series"].get<std::vector<std::string>>();
  } catch (const Json::exception&) {
    throw ValidationError("wrong type", "spec");
  }
  if (s.width < 100 || s.height < 100) throw ValidationError("plot must be at least 100x100", "spec");
  return s;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Line plot of each series against column `x`. A series name resolves to
/// the column "<name>_mean" when present, else "<name>"; a "<name>_std"
/// column adds a shaded band of mean +- std. Rows with a non-finite x or y
/// are skipped. Exactly one <polyline> per series; axes and ticks use <line>.
inline std::string plot_svg(const CsvTable& t, const PlotSpec& spec) {
  if (spec.series.empty()) throw ValidationError("no series to plot", "spec.series");
  if (!t.has(spec.x)) throw ValidationError("missing column", spec.x);
  const std::vector<double> xs = t.numbers(spec.x);

  struct Line {
    std::string name;
    std::vector<double> x, y, lo, hi;
  };
  std::vector<Line> lines;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : spec.series) {
    const std::string col = t.has(s + "_mean") ? s + "_mean" : s;
    if (!t.has(col)) throw ValidationError("missing column", s);
    const std::vector<double> ys = t.numbers(col);
    const std::vector<double> sd = t.has(s + "_std") ? t.numbers(s + "_std") : std::vector<double>(ys.size(), 0.0);
    Line l{s, {}, {}, {}, {}};
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) continue;
      const double d = std::isfinite(sd[i]) ? sd[i] : 0.0;
      l.x.push_back(xs[i]);
      l.y.push_back(ys[i]);
      l.lo.push_back(ys[i] - d);
      l.hi.push_back(ys[i] + d);
      x0 = std::min(x0, xs[i]);
      x1 = std::max(x1, xs[i]);
      y0 = std::min(y0, ys[i] - d);
      y1 = std::max(y1, ys[i] + d);
    }
    lines.push_back(std::move(l));
  }
  if (!std::isfinite(x0)) {
    x0 = 0.0;
    x1 = 1.0;
    y0 = 0.0;
    y1 = 1.0;
  }
  if (x1 - x0 <= 0.0) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 - y0 <= 1e-12 * std::max(1.0, std::abs(y0))) {
    const double pad = std::max(0.5, 0.1 * std::abs(y0));
    y0 -= pad;
    y1 += pad;
  }

  const double left = 70, right = 140, top = 40, bottom = 50;
  const double pw = spec.width - left - right, ph = spec.height - top - bottom;
  auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return top + (y1 - v) / (y1 - y0) * ph; };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\"" << spec.height << "\" viewBox=\"0 0 "
      << spec.width << ' ' << spec.height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty())
    svg << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
        << detail::escape_xml(spec.title) << "</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    svg << "<line x1=\"" << detail::fmt(px(xv)) << "\" y1=\"" << top + ph << "\" x2=\"" << detail::fmt(px(xv)) << "\" y2=\""
        << top + ph + 5 << "\" stroke=\"black\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", xv);
    svg << "<text x=\"" << detail::fmt(px(xv)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << buf
        << "</text>\n";
    svg << "<line x1=\"" << left - 5 << "\" y1=\"" << detail::fmt(py(yv)) << "\" x2=\"" << left << "\" y2=\"" << detail::fmt(py(yv))
        << "\" stroke=\"black\"/>\n";
    std::snprintf(buf, sizeof buf, "%.4g", yv);
    svg << "<text x=\"" << left - 8 << "\" y=\"" << detail::fmt(py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">" << buf
        << "</text>\n";
  }
  svg << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"" << spec.height - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << detail::escape_xml(spec.x) << "</text>\n";
  if (!spec.y.empty())
    svg << "<text x=\"16\" y=\"" << detail::fmt(top + ph / 2) << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
        << detail::fmt(top + ph / 2) << ")\">" << detail::escape_xml(spec.y) << "</text>\n";

  for (std::size_t s = 0; s < lines.size(); ++s) {
    const Line& l = lines[s];
    const char* color = palette[s % 8];
    svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < l.x.size(); ++i) svg << detail::fmt(px(l.x[i])) << ',' << detail::fmt(py(l.hi[i])) << ' ';
    for (std::size_t i = l.x.size(); i-- > 0;) svg << detail::fmt(px(l.x[i])) << ',' << detail::fmt(py(l.lo[i])) << ' ';
    svg << "\"/>\n";
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < l.x.size(); ++i) svg << (i ? " " : "") << detail::fmt(px(l.x[i])) << ',' << detail::fmt(py(l.y[i]));
    svg << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(s);
    svg << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly << "\" stroke=\""
        << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << detail::escape_xml(l.name)
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace lop
