#pragma once

// Average accuracy, averaged relative degradation and report files.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cmgr/core/errors.hpp"

namespace cmgr {

inline void check_accuracies(const std::vector<double>& acc) {
  for (double a : acc) {
    if (!std::isfinite(a) || a < 0.0 || a > 100.0) throw InvalidArgument("accuracy values must lie in [0, 100]");
  }
}

inline double avg_accuracy(const std::vector<double>& acc) {
  if (acc.empty()) throw InvalidArgument("avg_accuracy: empty accuracy list");
  check_accuracies(acc);
  double s = 0.0;
  for (double a : acc) s += a;
  return s / static_cast<double>(acc.size());
}

// (1/(T-1)) sum_t |Acc_t - Acc_{t+1}| / Acc_t, as a percentage.
inline double forgetting(const std::vector<double>& acc) {
  if (acc.size() < 2) throw InvalidArgument("forgetting: need at least two tasks");
  for (double a : acc) {
    if (!std::isfinite(a) || a < 0.0) throw InvalidArgument("forgetting: accuracies must be finite and >= 0");
  }
  double s = 0.0;
  for (std::size_t t = 0; t + 1 < acc.size(); ++t) {
    if (acc[t] == 0.0) throw DivisionByZero("forgetting: zero accuracy", t);
    s += std::abs(acc[t] - acc[t + 1]) / acc[t];
  }
  return 100.0 * s / static_cast<double>(acc.size() - 1);
}

// Half-up rounding to `digits` decimals. The scaled value is first snapped to
// 1e-9 so that e.g. 10.25 stored as 10.2499999 still rounds up.
inline double round_half_up(double v, int digits = 1) {
  const double scale = std::pow(10.0, digits);
  const double x = v * scale;
  const double snapped = std::round(x * 1e9) / 1e9;
  return std::floor(snapped + 0.5) / scale;
}

inline std::string format_fixed(double v, int digits = 1) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << round_half_up(v, digits);
  return os.str();
}

struct MetricsReport {
  std::vector<double> acc;
  std::vector<std::size_t> num_classes;  // classes in the evaluation pool per task
  double aa = 0.0;
  double delta_a = 0.0;

  std::size_t task_count() const { return acc.size(); }
};

inline MetricsReport make_report(const std::vector<double>& acc, std::vector<std::size_t> num_classes = {}) {
  MetricsReport r;
  r.acc = acc;
  r.aa = avg_accuracy(acc);
  r.delta_a = acc.size() >= 2 ? forgetting(acc) : 0.0;
  if (num_classes.empty()) num_classes.assign(acc.size(), 0);
  if (num_classes.size() != acc.size()) throw InvalidArgument("make_report: class count list length mismatch");
  r.num_classes = std::move(num_classes);
  return r;
}

enum class ReportFormat { csv, text };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "text" || s == "structured-text") return ReportFormat::text;
  throw InvalidArgument("unknown report format '" + s + "'");
}

inline std::string full_precision(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// CSV: header, one row per task with full-precision accuracy, then the
// display-rounded AA and delta_A footer rows. Text: `key = value` lines.
inline std::string render_report(const MetricsReport& r, ReportFormat fmt) {
  if (r.acc.empty()) throw InvalidArgument("write_report: empty report");
  std::ostringstream os;
  if (fmt == ReportFormat::csv) {
    os << "task_index,num_classes,acc\n";
    for (std::size_t t = 0; t < r.acc.size(); ++t) os << t << ',' << r.num_classes.at(t) << ',' << full_precision(r.acc[t]) << '\n';
    os << "AA," << format_fixed(r.aa) << '\n';
    os << "delta_A," << format_fixed(r.delta_a) << '\n';
  } else {
    os << "report.tasks = " << r.acc.size() << '\n';
    for (std::size_t t = 0; t < r.acc.size(); ++t) {
      os << "task." << t << ".num_classes = " << r.num_classes.at(t) << '\n';
      os << "task." << t << ".acc = " << full_precision(r.acc[t]) << '\n';
    }
    os << "report.AA = " << format_fixed(r.aa) << '\n';
    os << "report.delta_A = " << format_fixed(r.delta_a) << '\n';
  }
  return os.str();
}

inline void write_report(const MetricsReport& r, const std::filesystem::path& path, ReportFormat fmt) {
  const std::string body = render_report(r, fmt);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open report for writing", path.string());
  out << body;
  if (!out) throw IoError("failed writing report", path.string());
}

namespace detail {

inline double parse_number(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw ParseError("trailing characters in number '" + s + "'", line);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("invalid number '" + s + "'", line);
  }
}

}  // namespace detail

// Task rows are read back; AA and delta_A are recomputed from them.
inline MetricsReport parse_report(const std::string& text, ReportFormat fmt) {
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  std::vector<double> acc;
  std::vector<std::size_t> classes;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    if (fmt == ReportFormat::csv) {
      if (no == 1) {
        if (line != "task_index,num_classes,acc") throw ParseError("unexpected CSV header", no);
        continue;
      }
      std::vector<std::string> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (cells.size() == 2 && (cells[0] == "AA" || cells[0] == "delta_A")) continue;
      if (cells.size() != 3) throw ParseError("expected three CSV columns", no);
      if (static_cast<std::size_t>(detail::parse_number(cells[0], no)) != acc.size()) {
        throw ParseError("task rows out of order", no);
      }
      classes.push_back(static_cast<std::size_t>(detail::parse_number(cells[1], no)));
      acc.push_back(detail::parse_number(cells[2], no));
    } else {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw ParseError("expected 'key = value'", no);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
      if (key.rfind("task.", 0) != 0) continue;
      const auto dot = key.find('.', 5);
      if (dot == std::string::npos) throw ParseError("malformed task key", no);
      const auto t = static_cast<std::size_t>(detail::parse_number(key.substr(5, dot - 5), no));
      const std::string field = key.substr(dot + 1);
      if (field == "num_classes") {
        if (t != classes.size()) throw ParseError("task rows out of order", no);
        classes.push_back(static_cast<std::size_t>(detail::parse_number(value, no)));
      } else if (field == "acc") {
        if (t != acc.size()) throw ParseError("task rows out of order", no);
        acc.push_back(detail::parse_number(value, no));
      } else {
        throw ParseError("unknown task field '" + field + "'", no);
      }
    }
  }
  if (acc.empty()) throw ParseError("report has no task rows", no);
  return make_report(acc, classes);
}

inline MetricsReport read_report(const std::filesystem::path& path, ReportFormat fmt) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str(), fmt);
}

}  // namespace cmgr
