#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "carlab/errors.hpp"

namespace carlab {

struct ResultRow {
  std::string experiment_kind;
  std::string procedure;
  std::string working_model;  // empty for imbalance rows
  std::string test;           // empty for imbalance rows
  std::string delta;          // empty for imbalance rows
  std::string metric;         // Imb0, Imb1, ... or rejection_rate
  double value = 0.0;
  double mc_se = 0.0;
  std::size_t replicates = 0;
};

// A cell that was aborted because too many replicates failed.
struct CellFailure {
  std::string description;
  std::size_t failures = 0;
  std::size_t replicates = 0;
  std::string first_error;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::vector<CellFailure> failed_cells;
  // Replicate failures that stayed under the abort threshold.
  std::size_t excluded_replicates = 0;

  const ResultRow* find(const std::string& procedure, const std::string& metric,
                        const std::string& working_model = "", const std::string& test = "",
                        const std::string& delta = "") const {
    for (const auto& r : rows)
      if (r.procedure == procedure && r.metric == metric && r.working_model == working_model &&
          r.test == test && r.delta == delta)
        return &r;
    return nullptr;
  }
};

inline constexpr const char* kTableHeader =
    "experiment_kind,procedure,working_model,test,delta,metric,value,mc_se,replicates";

// Monte Carlo standard error of a rejection rate v over R replicates.
inline double rate_standard_error(double v, std::size_t replicates) {
  return std::sqrt(v * (1.0 - v) / static_cast<double>(replicates));
}

inline std::string format_fixed(double v, int decimals = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}
} // namespace detail

inline std::string render_table(const ResultTable& table) {
  std::string out = kTableHeader;
  out += '\n';
  for (const auto& r : table.rows) {
    out += detail::csv_field(r.experiment_kind) + ',' + detail::csv_field(r.procedure) + ',' +
           detail::csv_field(r.working_model) + ',' + detail::csv_field(r.test) + ',' +
           detail::csv_field(r.delta) + ',' + detail::csv_field(r.metric) + ',' +
           format_fixed(r.value) + ',' + format_fixed(r.mc_se) + ',' + std::to_string(r.replicates) +
           '\n';
  }
  return out;
}

inline void write_table(const ResultTable& table, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_table: cannot open " + path);
  f << render_table(table);
  if (!f) throw std::runtime_error("write_table: write failed for " + path);
}

} // namespace carlab
