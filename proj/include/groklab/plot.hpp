#pragma once

// Self-contained SVG line charts of run-log series. Accuracy series share a
// fixed [0, 1] left axis; all other metrics share an auto-scaled right axis.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "groklab/error.hpp"
#include "groklab/runlog.hpp"

namespace groklab {

struct PlotSpec {
  std::vector<std::string> logs;    // run log paths
  std::vector<std::string> labels;  // optional display name per log
  std::vector<std::string> series;  // metric names
  bool log_x = true;
  std::string output;
  std::string title;
};

struct PlotSeries {
  std::string label;
  std::string metric;
  std::vector<std::pair<double, double>> points;  // (step, value)
};

inline bool is_accuracy_series(const std::string& metric) {
  return metric.size() >= 4 && (metric.find("_acc") != std::string::npos || metric.rfind("acc", 0) == 0);
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  const double a = std::abs(v);
  if (v == 0.0) return "0";
  if (a >= 1e5 || a < 1e-3) {
    std::snprintf(buf, sizeof buf, "%.1e", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.4g", v);
  }
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

/// About `count` round tick values covering [lo, hi].
inline std::vector<double> nice_ticks(double lo, double hi, int count) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / count;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * step; t += step) ticks.push_back(t);
  return ticks;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace detail

/// Collects the selected series from every log. Throws when nothing is
/// selected or a metric is missing from any record of any log.
inline std::vector<PlotSeries> collect_series(const PlotSpec& spec) {
  if (spec.series.empty()) throw ConfigError("plot: no series selected");
  if (spec.logs.empty()) throw ConfigError("plot: no run logs given");
  if (!spec.labels.empty() && spec.labels.size() != spec.logs.size()) {
    throw ConfigError("plot: " + std::to_string(spec.labels.size()) + " labels for " +
                      std::to_string(spec.logs.size()) + " logs");
  }
  std::vector<PlotSeries> out;
  for (std::size_t i = 0; i < spec.logs.size(); ++i) {
    RunLog log = read_runlog(spec.logs[i]);
    if (log.records.empty()) throw ConfigError("plot: " + spec.logs[i] + " has no records");
    std::string label = spec.labels.empty() ? std::filesystem::path(spec.logs[i]).parent_path().filename().string()
                                            : spec.labels[i];
    if (label.empty()) label = spec.logs[i];
    for (const auto& metric : spec.series) {
      if (!log.has(metric)) throw ConfigError("plot: metric '" + metric + "' is not in every record of " + spec.logs[i]);
      PlotSeries s;
      s.label = spec.logs.size() > 1 ? label + ": " + metric : metric;
      s.metric = metric;
      for (const auto& r : log.records) {
        const double x = static_cast<double>(r.step);
        if (spec.log_x && x <= 0.0) continue;
        s.points.emplace_back(x, r.at(metric));
      }
      if (s.points.empty()) throw ConfigError("plot: series '" + s.label + "' has no plottable points");
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::string render_svg(const std::vector<PlotSeries>& series, const PlotSpec& spec) {
  const double width = 960, height = 540, left = 80, right = 90, top = 50, bottom = 60;
  const double pw = width - left - right, ph = height - top - bottom;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  bool any_acc = false, any_metric = false;
  for (const auto& s : series) {
    const bool acc = is_accuracy_series(s.metric);
    any_acc |= acc;
    any_metric |= !acc;
    for (auto [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      if (!acc) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
    }
  }
  if (!(xmax > xmin)) xmax = xmin + 1.0;
  if (any_metric) {
    if (!(ymax > ymin)) {
      ymin -= 0.5;
      ymax += 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
  }
  auto tx = [&](double x) {
    if (spec.log_x) return left + pw * (std::log10(x) - std::log10(xmin)) / (std::log10(xmax) - std::log10(xmin));
    return left + pw * (x - xmin) / (xmax - xmin);
  };
  auto ty_acc = [&](double y) { return top + ph * (1.0 - y); };
  auto ty_metric = [&](double y) { return top + ph * (1.0 - (y - ymin) / (ymax - ymin)); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty()) {
    svg << "<text x=\"" << width / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">"
        << detail::escape_xml(spec.title) << "</text>\n";
  }
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";

  // x axis
  std::vector<double> xticks;
  if (spec.log_x) {
    for (double p = std::ceil(std::log10(xmin)); p <= std::floor(std::log10(xmax)) + 1e-9; p += 1.0) {
      xticks.push_back(std::pow(10.0, p));
    }
  } else {
    xticks = detail::nice_ticks(xmin, xmax, 8);
  }
  for (double t : xticks) {
    const double x = tx(t);
    svg << "<line x1=\"" << detail::fmt(x) << "\" y1=\"" << top << "\" x2=\"" << detail::fmt(x) << "\" y2=\""
        << top + ph << "\" stroke=\"#e0e0e0\"/>\n";
    svg << "<text x=\"" << detail::fmt(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << detail::tick_label(t) << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\">step"
      << (spec.log_x ? " (log scale)" : "") << "</text>\n";

  // y axes
  if (any_acc) {
    for (double t : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const double y = ty_acc(t);
      svg << "<line x1=\"" << left << "\" y1=\"" << detail::fmt(y) << "\" x2=\"" << left + pw << "\" y2=\""
          << detail::fmt(y) << "\" stroke=\"#f0f0f0\"/>\n";
      svg << "<text x=\"" << left - 8 << "\" y=\"" << detail::fmt(y + 4) << "\" text-anchor=\"end\">"
          << detail::tick_label(t) << "</text>\n";
    }
    svg << "<text transform=\"translate(22," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">accuracy</text>\n";
  }
  if (any_metric) {
    const double axis_x = any_acc ? left + pw : left;
    const char* anchor = any_acc ? "start" : "end";
    const double offset = any_acc ? 8 : -8;
    for (double t : detail::nice_ticks(ymin, ymax, 6)) {
      const double y = ty_metric(t);
      svg << "<text x=\"" << axis_x + offset << "\" y=\"" << detail::fmt(y + 4) << "\" text-anchor=\"" << anchor
          << "\">" << detail::tick_label(t) << "</text>\n";
    }
    const double label_x = any_acc ? width - 18 : 22;
    svg << "<text transform=\"translate(" << label_x << "," << top + ph / 2
        << ") rotate(-90)\" text-anchor=\"middle\">metric value</text>\n";
  }

  // series
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const bool acc = is_accuracy_series(s.metric);
    const char* color = detail::kPalette[i % std::size(detail::kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\""
        << (acc ? "" : " stroke-dasharray=\"6 3\"") << " points=\"";
    for (auto [x, y] : s.points) {
      svg << detail::fmt(tx(x)) << ',' << detail::fmt(acc ? ty_acc(y) : ty_metric(y)) << ' ';
    }
    svg << "\"/>\n";
  }

  // legend
  const double lx = left + 12, ly = top + 12, row = 18;
  double longest = 0;
  for (const auto& s : series) longest = std::max(longest, static_cast<double>(s.label.size()));
  svg << "<rect x=\"" << lx - 6 << "\" y=\"" << ly - 6 << "\" width=\"" << 40 + 7 * longest << "\" height=\""
      << row * static_cast<double>(series.size()) + 8 << "\" fill=\"white\" fill-opacity=\"0.85\" stroke=\"#999\"/>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = ly + row * static_cast<double>(i) + 6;
    const char* color = detail::kPalette[i % std::size(detail::kPalette)];
    svg << "<line x1=\"" << lx << "\" y1=\"" << y << "\" x2=\"" << lx + 24 << "\" y2=\"" << y << "\" stroke=\""
        << color << "\" stroke-width=\"2\"" << (is_accuracy_series(series[i].metric) ? "" : " stroke-dasharray=\"6 3\"")
        << "/>\n";
    svg << "<text x=\"" << lx + 30 << "\" y=\"" << y + 4 << "\">" << detail::escape_xml(series[i].label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// Validates, renders, and only then writes the SVG.
inline void write_plot(const PlotSpec& spec) {
  if (spec.output.empty()) throw ConfigError("plot: no output path");
  auto series = collect_series(spec);
  const std::string svg = render_svg(series, spec);
  std::ofstream out(spec.output, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + spec.output);
  out << svg;
  if (!out) throw FormatError("short write to " + spec.output);
}

}  // namespace groklab
