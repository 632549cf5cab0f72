/*
 * Copyright 2026 The cohortfx Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>

#include "cohortfx/error.hpp"

namespace cohortfx::preprocess {

using Cell = std::optional<double>;
using ColumnValues = std::vector<Cell>;

enum class ColumnKind { binary, continuous, categorical_encoded };

inline std::string_view kind_name(ColumnKind k) {
  switch (k) {
    case ColumnKind::binary: return "binary";
    case ColumnKind::continuous: return "continuous";
    case ColumnKind::categorical_encoded: return "categorical-encoded";
  }
  return "?";
}

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::continuous;
  ColumnValues values;

  std::size_t missing_count() const {
    return static_cast<std::size_t>(
        std::count_if(values.begin(), values.end(), [](const Cell& c) { return !c.has_value(); }));
  }
  double missing_fraction() const {
    return values.empty() ? 0.0 : static_cast<double>(missing_count()) / values.size();
  }
};

/// Patient-by-covariate rectangle. A disengaged optional is a missing cell, so
/// the missingness mask is carried per cell.
class CovariateTable {
 public:
  CovariateTable() = default;

  explicit CovariateTable(std::vector<std::string> patient_ids) : ids_(std::move(patient_ids)) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids_)
      if (!seen.insert(id).second) throw Error("duplicate patient id '" + id + "'");
  }

  void add_column(Column col) {
    if (col.values.size() != ids_.size())
      throw Error(fmt::format("column '{}' has {} values for {} patients", col.name,
                              col.values.size(), ids_.size()));
    if (find(col.name)) throw Error("duplicate column name '" + col.name + "'");
    if (col.kind != ColumnKind::continuous) {
      for (const auto& v : col.values)
        if (v && *v != 0.0 && *v != 1.0)
          throw Error(fmt::format("binary column '{}' holds value {}", col.name, *v));
    }
    cols_.push_back(std::move(col));
  }

  const std::vector<std::string>& patient_ids() const noexcept { return ids_; }
  const std::vector<Column>& columns() const noexcept { return cols_; }
  std::size_t rows() const noexcept { return ids_.size(); }
  std::size_t cols() const noexcept { return cols_.size(); }

  const Column* find(std::string_view name) const {
    for (const auto& c : cols_)
      if (c.name == name) return &c;
    return nullptr;
  }

  const Column& column(std::string_view name) const {
    if (const auto* c = find(name)) return *c;
    throw Error("no column named '" + std::string(name) + "'");
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> out;
    out.reserve(cols_.size());
    for (const auto& c : cols_) out.push_back(c.name);
    return out;
  }

  bool is_missing(std::size_t row, std::size_t col) const { return !cols_.at(col).values.at(row); }

  void replace_values(std::string_view name, ColumnValues values) {
    for (auto& c : cols_) {
      if (c.name != name) continue;
      if (values.size() != ids_.size()) throw Error("replace_values: size mismatch for " + c.name);
      c.values = std::move(values);
      return;
    }
    throw Error("no column named '" + std::string(name) + "'");
  }

  CovariateTable select_rows(std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (auto r : rows) ids.push_back(ids_.at(r));
    CovariateTable out(std::move(ids));
    for (const auto& c : cols_) {
      Column nc{c.name, c.kind, {}};
      nc.values.reserve(rows.size());
      for (auto r : rows) nc.values.push_back(c.values[r]);
      out.cols_.push_back(std::move(nc));
    }
    return out;
  }

  CovariateTable without_columns(const std::set<std::string>& names) const {
    CovariateTable out(ids_);
    for (const auto& c : cols_)
      if (!names.count(c.name)) out.cols_.push_back(c);
    return out;
  }

  std::optional<std::size_t> row_of(std::string_view id) const {
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (ids_[i] == id) return i;
    return std::nullopt;
  }

 private:
  std::vector<std::string> ids_;
  std::vector<Column> cols_;
};

// ---------------------------------------------------------------------------
// Missingness filter

struct DroppedColumn {
  std::string name;
  double missing_fraction = 0.0;
  std::string reason;
};

struct ColumnFilterResult {
  CovariateTable table;
  std::vector<DroppedColumn> dropped;
  std::vector<std::string> warnings;
};

/// Drops every column whose missing fraction is strictly above `threshold`,
/// unless it is named in `keep_list`.
inline ColumnFilterResult filter_high_missing_columns(const CovariateTable& table, double threshold,
                                                      std::span<const std::string> keep_list = {}) {
  if (table.rows() == 0) throw Error("filter_high_missing_columns: no rows");
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw Error(fmt::format("filter_high_missing_columns: threshold {} outside [0,1]", threshold));

  ColumnFilterResult res;
  std::set<std::string> keep(keep_list.begin(), keep_list.end());
  for (const auto& k : keep)
    if (!table.find(k)) res.warnings.push_back("keep-list column '" + k + "' not present; ignored");

  std::set<std::string> drop;
  for (const auto& c : table.columns()) {
    double frac = c.missing_fraction();
    if (frac > threshold && !keep.count(c.name)) {
      drop.insert(c.name);
      res.dropped.push_back({c.name, frac, fmt::format("missing fraction {:.4f} > {}", frac, threshold)});
    }
  }
  res.table = table.without_columns(drop);
  return res;
}

// ---------------------------------------------------------------------------
// Column transforms

/// Nearest-rank percentile: the smallest observed value with at least
/// ceil(p * N) observations at or below it.
inline double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw Error("nearest_rank_percentile: no values");
  std::sort(values.begin(), values.end());
  auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// Caps the upper tail at the nearest-rank `upper_percentile` of the
/// non-missing values. Missing cells stay missing; there is no lower cap.
inline ColumnValues winsorize_column(std::span<const Cell> values, double upper_percentile) {
  if (!(upper_percentile > 0.0 && upper_percentile < 1.0))
    throw Error(fmt::format("winsorize_column: percentile {} outside (0,1)", upper_percentile));
  std::vector<double> present;
  for (const auto& v : values)
    if (v) present.push_back(*v);
  if (present.empty()) throw Error("winsorize_column: column has no non-missing values");
  double cap = nearest_rank_percentile(std::move(present), upper_percentile);
  ColumnValues out(values.begin(), values.end());
  for (auto& v : out)
    if (v && *v > cap) v = cap;
  return out;
}

/// log(1 + x) on every non-missing cell. Labs are nonnegative; a negative
/// value is a data error.
inline ColumnValues log_transform_column(std::span<const Cell> values) {
  ColumnValues out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i]) continue;
    double x = *values[i];
    if (x < 0.0 || std::isnan(x))
      throw Error(fmt::format("log_transform_column: negative value {} at row {}", x, i));
    out[i] = std::log1p(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vitals

struct VitalReading {
  double hours = 0.0;
  double value = 0.0;
};

struct VitalsSeries {
  std::string patient_id;
  std::string vital_name;
  std::vector<VitalReading> readings;

  /// Sorts readings by time and rejects negative timestamps.
  static VitalsSeries make(std::string patient_id, std::string vital_name,
                           std::vector<VitalReading> readings) {
    for (const auto& r : readings)
      if (r.hours < 0.0)
        throw Error(fmt::format("vitals for {} ({}): negative timestamp {}", patient_id, vital_name,
                                r.hours));
    std::stable_sort(readings.begin(), readings.end(),
                     [](const VitalReading& a, const VitalReading& b) { return a.hours < b.hours; });
    return {std::move(patient_id), std::move(vital_name), std::move(readings)};
  }
};

struct VitalSummary {
  Cell mean;
  Cell min;
  Cell max;
};

inline VitalSummary summarize_vitals(const VitalsSeries& series, double window_hours) {
  if (!(window_hours > 0.0)) throw Error("summarize_vitals: window_hours must be positive");
  double sum = 0.0, lo = 0.0, hi = 0.0;
  std::size_t n = 0;
  for (const auto& r : series.readings) {
    if (r.hours > window_hours) continue;
    if (n == 0) {
      lo = hi = r.value;
    } else {
      lo = std::min(lo, r.value);
      hi = std::max(hi, r.value);
    }
    sum += r.value;
    ++n;
  }
  if (n == 0) return {};
  return {sum / static_cast<double>(n), lo, hi};
}

// ---------------------------------------------------------------------------
// Row filtering

struct CompleteCaseResult {
  CovariateTable table;
  std::vector<std::size_t> retained_rows;  // indices into the input table
  std::vector<std::string> dropped_ids;
};

inline CompleteCaseResult complete_cases(const CovariateTable& table,
                                         std::span<const std::string> required) {
  std::vector<const Column*> req;
  for (const auto& name : required) req.push_back(&table.column(name));
  CompleteCaseResult res;
  for (std::size_t r = 0; r < table.rows(); ++r) {
    bool ok = std::all_of(req.begin(), req.end(), [r](const Column* c) { return c->values[r].has_value(); });
    if (ok)
      res.retained_rows.push_back(r);
    else
      res.dropped_ids.push_back(table.patient_ids()[r]);
  }
  res.table = table.select_rows(res.retained_rows);
  return res;
}

// ---------------------------------------------------------------------------
// Categorical encoding

struct EncodedCategorical {
  std::string source;
  std::string reference_level;
  std::vector<std::string> columns;
};

/// One-hot encodes a string column; the most frequent level (ties: the
/// lexicographically smallest) is the reference and gets no column. Empty
/// cells are missing in every indicator.
inline std::pair<std::vector<Column>, EncodedCategorical> one_hot_encode(
    std::string_view name, std::span<const std::string> raw) {
  std::map<std::string, std::size_t> counts;
  for (const auto& v : raw)
    if (!v.empty()) ++counts[v];
  if (counts.empty()) throw Error("one_hot_encode: column '" + std::string(name) + "' is empty");
  std::string ref;
  std::size_t best = 0;
  for (const auto& [level, n] : counts) {
    if (n > best) {
      best = n;
      ref = level;
    }
  }
  EncodedCategorical info{std::string(name), ref, {}};
  std::vector<Column> cols;
  for (const auto& [level, n] : counts) {
    if (level == ref) continue;
    Column c{std::string(name) + "_" + level, ColumnKind::categorical_encoded, {}};
    c.values.reserve(raw.size());
    for (const auto& v : raw) {
      if (v.empty())
        c.values.emplace_back();
      else
        c.values.emplace_back(v == level ? 1.0 : 0.0);
    }
    info.columns.push_back(c.name);
    cols.push_back(std::move(c));
  }
  return {std::move(cols), std::move(info)};
}

/// Binary when every non-missing value is 0 or 1, continuous otherwise.
inline ColumnKind infer_numeric_kind(std::span<const Cell> values) {
  bool any = false;
  for (const auto& v : values) {
    if (!v) continue;
    any = true;
    if (*v != 0.0 && *v != 1.0) return ColumnKind::continuous;
  }
  return any ? ColumnKind::binary : ColumnKind::continuous;
}

}  // namespace cohortfx::preprocess
