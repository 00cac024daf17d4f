#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ensf/error.hpp"
#include "ensf/format.hpp"
#include "ensf/types.hpp"

namespace ensf {

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Time-major table: one row per time step, one column per component. Missing
/// cells hold NaN in `values` and true in `missing`.
struct TrajectoryTable {
  std::vector<std::string> columns;
  Matrix values;
  BoolMatrix missing;

  Eigen::Index steps() const noexcept { return values.rows(); }
  Eigen::Index components() const noexcept { return values.cols(); }

  static TrajectoryTable from_matrix(std::vector<std::string> columns, Matrix values) {
    TrajectoryTable t;
    t.columns = std::move(columns);
    t.missing = values.array().isNaN();
    t.values = std::move(values);
    return t;
  }

  /// Column names "0", "1", ... for an unnamed matrix.
  static std::vector<std::string> index_columns(Eigen::Index n) {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) out.push_back(std::to_string(i));
    return out;
  }
};

// --- LogMinMax normalization -------------------------------------------------

/// Min and max of log(1 + x) over the fitting data, global or per component.
struct NormalizationStats {
  bool per_component = false;
  Vector lower;  ///< size 1 when global
  Vector upper;

  double lo(Eigen::Index i) const { return per_component ? lower[i] : lower[0]; }
  double hi(Eigen::Index i) const { return per_component ? upper[i] : upper[0]; }
};

inline NormalizationStats log_minmax_fit(const TrajectoryTable& data, bool per_component = false) {
  const Eigen::Index groups = per_component ? data.components() : 1;
  NormalizationStats stats;
  stats.per_component = per_component;
  stats.lower = Vector::Constant(groups, std::numeric_limits<double>::infinity());
  stats.upper = Vector::Constant(groups, -std::numeric_limits<double>::infinity());
  for (Eigen::Index r = 0; r < data.steps(); ++r) {
    for (Eigen::Index c = 0; c < data.components(); ++c) {
      if (data.missing(r, c)) continue;
      const double x = data.values(r, c);
      if (!std::isfinite(x)) {
        throw DataError("non-finite value at row " + std::to_string(r) + ", column " +
                        std::to_string(c));
      }
      if (x < 0.0) {
        throw DataError("negative consumption " + format_double(x) + " at row " +
                        std::to_string(r) + ", column " + std::to_string(c));
      }
      const double v = std::log1p(x);
      const Eigen::Index g = per_component ? c : 0;
      stats.lower[g] = std::min(stats.lower[g], v);
      stats.upper[g] = std::max(stats.upper[g], v);
    }
  }
  for (Eigen::Index g = 0; g < groups; ++g) {
    if (!std::isfinite(stats.lower[g])) {
      throw DataError("normalization group " + std::to_string(g) + " has no observed values");
    }
    if (!(stats.upper[g] > stats.lower[g])) {
      throw DataError("normalization group " + std::to_string(g) + " has a degenerate range");
    }
  }
  return stats;
}

/// u = (log(1 + x) - min) / (max - min) for component `i`.
inline double log_minmax_apply(double x, const NormalizationStats& stats, Eigen::Index i = 0) {
  if (!std::isfinite(x)) throw DataError("cannot normalize a non-finite value");
  if (x < 0.0) throw DataError("cannot normalize negative consumption " + format_double(x));
  return (std::log1p(x) - stats.lo(i)) / (stats.hi(i) - stats.lo(i));
}

/// x = exp(u (max - min) + min) - 1; values outside [0, 1] are inverted formally.
inline double log_minmax_invert(double u, const NormalizationStats& stats, Eigen::Index i = 0) {
  if (!std::isfinite(u)) throw DataError("cannot invert a non-finite value");
  return std::expm1(u * (stats.hi(i) - stats.lo(i)) + stats.lo(i));
}

inline Vector log_minmax_apply(const Vector& x, const NormalizationStats& stats) {
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = log_minmax_apply(x[i], stats, i);
  return out;
}

inline Vector log_minmax_invert(const Vector& u, const NormalizationStats& stats) {
  Vector out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = log_minmax_invert(u[i], stats, i);
  return out;
}

// --- metrics -----------------------------------------------------------------

struct Metrics {
  double mae = 0.0;
  double mape = 0.0;  ///< percent; NaN when every truth component is below the floor
  double rmse = 0.0;
};

/// Truth magnitudes at or below this are left out of MAPE.
inline constexpr double kMapeFloor = 1e-6;

/// MAE, MAPE and RMSE over non-missing components. `missing` may be empty.
inline Metrics compute_metrics(const Vector& estimate, const Vector& truth,
                               const std::vector<bool>& missing = {},
                               double mape_floor = kMapeFloor) {
  if (estimate.size() != truth.size()) throw UsageError("metric inputs differ in length");
  if (!missing.empty() && static_cast<Eigen::Index>(missing.size()) != truth.size()) {
    throw UsageError("missing mask length differs from the state length");
  }
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  double pct_sum = 0.0;
  Eigen::Index n = 0;
  Eigen::Index n_pct = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (!missing.empty() && missing[static_cast<std::size_t>(i)]) continue;
    const double diff = estimate[i] - truth[i];
    abs_sum += std::abs(diff);
    sq_sum += diff * diff;
    ++n;
    if (std::abs(truth[i]) > mape_floor) {
      pct_sum += std::abs(diff / truth[i]);
      ++n_pct;
    }
  }
  if (n == 0) throw UsageError("metrics need at least one non-missing component");
  Metrics out;
  out.mae = abs_sum / static_cast<double>(n);
  out.rmse = std::sqrt(sq_sum / static_cast<double>(n));
  out.mape = n_pct > 0 ? 100.0 * pct_sum / static_cast<double>(n_pct)
                       : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// --- CSV I/O -----------------------------------------------------------------

enum class TableFormat { kCsv };

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parse CSV text: header of component identifiers, then one row per step.
/// Empty cells are missing. Rows and columns in errors are 1-based.
inline TrajectoryTable parse_trajectory(std::istream& in) {
  std::string line;
  std::size_t row = 0;
  TrajectoryTable table;
  bool have_header = false;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++row;
    if (row == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (!have_header) {
      for (auto c : cells) table.columns.emplace_back(detail::trim(c));
      have_header = true;
      continue;
    }
    if (cells.size() != table.columns.size()) {
      throw ParseError("row has " + std::to_string(cells.size()) + " cells but the header has " +
                           std::to_string(table.columns.size()),
                       row, std::min(cells.size(), table.columns.size()) + 1);
    }
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = detail::trim(cells[c]);
      if (cell.empty()) {
        values[c] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const auto v = parse_double(cell);
      if (!v || !std::isfinite(*v)) {
        throw ParseError("non-numeric cell '" + std::string(cell) + "'", row, c + 1);
      }
      values[c] = *v;
    }
    rows.push_back(std::move(values));
  }
  if (!have_header) throw ParseError("missing header row", 1, 1);
  Matrix values(static_cast<Eigen::Index>(rows.size()),
                static_cast<Eigen::Index>(table.columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return TrajectoryTable::from_matrix(std::move(table.columns), std::move(values));
}

inline TrajectoryTable load_trajectory(const std::filesystem::path& path,
                                       TableFormat = TableFormat::kCsv) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trajectory file " + path.string());
  return parse_trajectory(in);
}

inline void write_table(std::ostream& out, const TrajectoryTable& table) {
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (c > 0) out << ',';
    out << table.columns[c];
  }
  out << '\n';
  for (Eigen::Index r = 0; r < table.steps(); ++r) {
    for (Eigen::Index c = 0; c < table.components(); ++c) {
      if (c > 0) out << ',';
      const double v = table.values(r, c);
      if (!table.missing(r, c) && std::isfinite(v)) out << format_double(v);
    }
    out << '\n';
  }
}

inline void write_table(const std::filesystem::path& path, const TrajectoryTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_table(out, table);
  if (!out) throw ConfigError("failed while writing " + path.string());
}

}  // namespace ensf
