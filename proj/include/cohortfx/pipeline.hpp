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

// preprocess -> cohort -> propensity -> matching -> estimation -> report.
// run_analysis works in memory; run_pipeline adds file I/O and writes each
// stage's artifacts as soon as the stage finishes, so a failed run keeps the
// logs of the stages before it.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "cohortfx/cohort.hpp"
#include "cohortfx/csv.hpp"
#include "cohortfx/error.hpp"
#include "cohortfx/estimation.hpp"
#include "cohortfx/glm.hpp"
#include "cohortfx/io.hpp"
#include "cohortfx/matching.hpp"
#include "cohortfx/preprocess.hpp"
#include "cohortfx/synth.hpp"
#include "cohortfx/version.hpp"

namespace cohortfx::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Analysis { ac, steroid, fxa };

inline std::string_view analysis_name(Analysis a) {
  switch (a) {
    case Analysis::ac: return "ac";
    case Analysis::steroid: return "steroid";
    case Analysis::fxa: return "fxa";
  }
  return "?";
}

inline Analysis parse_analysis(std::string_view s) {
  if (s == "ac") return Analysis::ac;
  if (s == "steroid") return Analysis::steroid;
  if (s == "fxa") return Analysis::fxa;
  throw Error("unknown analysis '" + std::string(s) + "' (expected ac, steroid or fxa)");
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  Analysis analysis = Analysis::steroid;
  fs::path data_dir = ".";
  fs::path out_dir = "out";
  double window_hours = 72.0;
  bool allow_nonstandard_window = false;
  double caliper = 0.05;
  matching::CaliperUnit caliper_unit = matching::CaliperUnit::sd;
  int ratio = 3;
  bool replace = true;
  double ddimer_cutoff = cohort::kDdimerCutoff;
  double missing_threshold = 0.2;
  std::optional<std::vector<std::string>> keep_list;  // unset: D-dimer for ac, nothing otherwise
  double winsor_percentile = 0.99;
  double vitals_window_hours = 24.0;
  std::string lab_prefix = "l36_";
  std::uint64_t seed = 1;
  double ridge = 0.0;
  estimation::MatchedVariance variance = estimation::MatchedVariance::analytic;
  int bootstrap_reps = 1000;
  bool select_covariates = true;
  int cv_folds = 10;
  int hist_bins = 30;

  std::vector<std::string> effective_keep_list() const {
    if (keep_list) return *keep_list;
    if (analysis == Analysis::ac) return {lab_prefix + "d_dimer"};
    return {};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw StageError(Stage::config, m); };
    if (!(window_hours > 0)) fail("window_hours must be positive");
    if (!allow_nonstandard_window &&
        std::find(cohort::kStandardWindows.begin(), cohort::kStandardWindows.end(), window_hours) ==
            cohort::kStandardWindows.end())
      fail(fmt::format("window_hours {} is not one of 24/48/72/96 (set allow_nonstandard_window)", window_hours));
    if (!(caliper > 0)) fail("caliper must be positive");
    if (caliper_unit == matching::CaliperUnit::absolute && caliper >= 1.0)
      fail("absolute caliper must be below 1");
    if (ratio < 1 || ratio > 20) fail("ratio must be in [1, 20]");
    if (!(ddimer_cutoff > 0)) fail("ddimer_cutoff must be positive");
    if (!(missing_threshold >= 0 && missing_threshold <= 1)) fail("missing_threshold must lie in [0, 1]");
    if (!(winsor_percentile > 0 && winsor_percentile < 1)) fail("winsor_percentile must lie in (0, 1)");
    if (!(vitals_window_hours > 0)) fail("vitals_window_hours must be positive");
    if (ridge < 0) fail("ridge must be nonnegative");
    if (bootstrap_reps < 2) fail("bootstrap_reps must be at least 2");
    if (cv_folds < 2) fail("cv_folds must be at least 2");
    if (hist_bins < 2) fail("hist_bins must be at least 2");
  }
};

inline std::string variance_name(estimation::MatchedVariance v) {
  return v == estimation::MatchedVariance::analytic ? "analytic" : "bootstrap";
}

/// Every parameter that can change an output, as JSON (paths excluded so
/// identical configurations in different directories give identical bytes).
inline json config_json(const PipelineConfig& c) {
  return {{"analysis", analysis_name(c.analysis)},
          {"window_hours", c.window_hours},
          {"caliper", c.caliper},
          {"caliper_unit", matching::caliper_unit_name(c.caliper_unit)},
          {"ratio", c.ratio},
          {"replace", c.replace},
          {"treated_order", "descending-score"},
          {"ddimer_cutoff", c.ddimer_cutoff},
          {"missing_threshold", c.missing_threshold},
          {"keep_list", c.effective_keep_list()},
          {"winsor_percentile", c.winsor_percentile},
          {"vitals_window_hours", c.vitals_window_hours},
          {"lab_prefix", c.lab_prefix},
          {"seed", c.seed},
          {"ridge", c.ridge},
          {"variance", variance_name(c.variance)},
          {"bootstrap_reps", c.bootstrap_reps},
          {"select_covariates", c.select_covariates},
          {"cv_folds", c.cv_folds},
          {"hist_bins", c.hist_bins}};
}

/// One-line parameter summary written at the top of every CSV output.
inline std::string params_line(const PipelineConfig& c) {
  return fmt::format(
      "params: analysis={} seed={} window_hours={} caliper={} caliper_unit={} ratio={} replace={} "
      "ddimer_cutoff={} missing_threshold={} version={}",
      analysis_name(c.analysis), c.seed, csv::format_number(c.window_hours), csv::format_number(c.caliper),
      matching::caliper_unit_name(c.caliper_unit), c.ratio, c.replace ? "true" : "false",
      csv::format_number(c.ddimer_cutoff), csv::format_number(c.missing_threshold), kVersion);
}

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string unquote(std::string s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

inline double to_double(const std::string& key, const std::string& v) {
  if (!csv::is_number(v)) throw Error(fmt::format("'{}' expects a number, got '{}'", key, v));
  return *csv::parse_number(v);
}

inline int to_int(const std::string& key, const std::string& v) {
  double d = to_double(key, v);
  if (d != std::floor(d)) throw Error(fmt::format("'{}' expects an integer, got '{}'", key, v));
  return static_cast<int>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(fmt::format("'{}' expects true or false, got '{}'", key, v));
}

inline std::vector<std::string> to_list(std::string v) {
  v = trim(v);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw Error("unterminated list: " + v);
    v = v.substr(1, v.size() - 2);
  }
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = unquote(trim(item));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace detail

/// Sets one configuration key from its textual value.
inline void apply_setting(PipelineConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = unquote(trim(raw));
  if (key == "analysis") c.analysis = parse_analysis(v);
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "out_dir") c.out_dir = v;
  else if (key == "window_hours") c.window_hours = to_double(key, v);
  else if (key == "allow_nonstandard_window") c.allow_nonstandard_window = to_bool(key, v);
  else if (key == "caliper") c.caliper = to_double(key, v);
  else if (key == "caliper_unit") c.caliper_unit = matching::parse_caliper_unit(v);
  else if (key == "ratio") c.ratio = to_int(key, v);
  else if (key == "replace") c.replace = to_bool(key, v);
  else if (key == "ddimer_cutoff") c.ddimer_cutoff = to_double(key, v);
  else if (key == "missing_threshold") c.missing_threshold = to_double(key, v);
  else if (key == "keep_list") c.keep_list = to_list(raw);
  else if (key == "winsor_percentile") c.winsor_percentile = to_double(key, v);
  else if (key == "vitals_window_hours") c.vitals_window_hours = to_double(key, v);
  else if (key == "lab_prefix") c.lab_prefix = v;
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, v));
  else if (key == "ridge") c.ridge = to_double(key, v);
  else if (key == "variance") {
    if (v == "analytic") c.variance = estimation::MatchedVariance::analytic;
    else if (v == "bootstrap") c.variance = estimation::MatchedVariance::bootstrap;
    else throw Error("variance must be 'analytic' or 'bootstrap', got '" + v + "'");
  }
  else if (key == "bootstrap_reps") c.bootstrap_reps = to_int(key, v);
  else if (key == "select_covariates") c.select_covariates = to_bool(key, v);
  else if (key == "cv_folds") c.cv_folds = to_int(key, v);
  else if (key == "hist_bins") c.hist_bins = to_int(key, v);
  else throw Error("unknown configuration key '" + key + "'");
}

/// Parses `key = value` lines. `#` starts a comment, `[section]` headers are
/// ignored, keys may use '-' or '_'.
inline PipelineConfig parse_config(std::string_view text, PipelineConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    auto t = detail::trim(line);
    if (t.empty() || t.front() == '[') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw StageError(Stage::config, fmt::format("config line {}: expected key = value", lineno));
    auto key = detail::trim(t.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    try {
      apply_setting(base, key, t.substr(eq + 1));
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(Stage::config, fmt::format("config line {}: {}", lineno, e.what()));
    }
  }
  return base;
}

inline PipelineConfig load_config(const fs::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw StageError(Stage::config, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// ---------------------------------------------------------------------------
// Stage results

struct PreparedCovariates {
  preprocess::CovariateTable table;  // every patient, analysis scale
  std::vector<preprocess::DroppedColumn> dropped_columns;
  std::vector<preprocess::EncodedCategorical> encoded;
  std::map<std::string, double> winsor_caps;  // lab -> cap on the log1p scale
  std::map<std::string, std::size_t> winsorized;
  std::vector<std::string> vital_columns;
  std::vector<std::string> warnings;
};

struct DdimerBandRow {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;  // +inf for the top band
  std::size_t n = 0;
  std::size_t n_treated = 0;
};

struct AnalysisResult {
  PipelineConfig config;
  PreparedCovariates prepared;
  std::vector<cohort::ArmAssignment> arms;  // patients.csv order
  std::vector<int> osfd;                     // patients.csv order
  std::map<std::string, std::size_t> reason_counts;
  std::size_t flagged_doses = 0;
  std::vector<DdimerBandRow> ddimer_bands;   // ac only

  std::vector<std::string> ids;              // analysis rows
  std::vector<std::string> incomplete_ids;   // eligible arm, missing covariate
  std::vector<std::string> dropped_constant;
  glm::DesignMatrix x;
  std::vector<int> treated;
  std::vector<double> y;

  glm::FittedModel propensity;
  std::vector<double> ps;
  matching::MatchedSet matched;
  std::vector<double> match_weights;         // aligned with ids
  std::vector<matching::BalanceRow> balance;
  matching::Histogram hist;

  std::vector<estimation::EffectEstimate> effects;  // unadjusted, regression, matched
  double correlation = 0.0;
  std::optional<estimation::ImportantCovariates> important;
  std::vector<std::string> warnings;

  std::size_t n_treated() const { return static_cast<std::size_t>(std::count(treated.begin(), treated.end(), 1)); }
  std::size_t n_control() const { return treated.size() - n_treated(); }
  const estimation::EffectEstimate& effect(estimation::Estimator e) const {
    for (const auto& x : effects)
      if (x.estimator == e) return x;
    throw Error("no estimate for " + std::string(estimation::estimator_name(e)));
  }
};

using StageHook = std::function<void(Stage, const AnalysisResult&)>;

// ---------------------------------------------------------------------------
// Stages

/// patients.csv + vitals -> analysis-scale covariates for every patient.
inline PreparedCovariates prepare_covariates(const io::InputData& d, const PipelineConfig& cfg) {
  using namespace preprocess;
  const auto& t = d.patients;
  io::validate_patients(t);
  PreparedCovariates out;
  std::vector<std::string> ids;
  ids.reserve(t.rows.size());
  for (const auto& r : t.rows) ids.push_back(r[0]);
  CovariateTable table(ids);

  for (std::size_t c = 1; c < t.header.size(); ++c) {
    std::vector<std::string> raw;
    raw.reserve(t.rows.size());
    bool numeric = true;
    for (const auto& r : t.rows) {
      raw.push_back(r[c]);
      const auto& s = raw.back();
      if (!s.empty() && s != "NA" && !csv::is_number(s)) numeric = false;
    }
    if (numeric) {
      ColumnValues v;
      v.reserve(raw.size());
      for (const auto& s : raw) v.push_back(csv::parse_number(s));
      auto kind = infer_numeric_kind(v);
      table.add_column({t.header[c], kind, std::move(v)});
    } else {
      auto [cols, info] = one_hot_encode(t.header[c], raw);
      for (auto& col : cols) table.add_column(std::move(col));
      out.encoded.push_back(std::move(info));
    }
  }

  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of.emplace(ids[i], i);
  std::map<std::string, std::vector<const VitalsSeries*>> by_vital;
  for (const auto& s : d.vitals) {
    auto it = row_of.find(s.patient_id);
    if (it == row_of.end()) throw Error("vitals for unknown patient '" + s.patient_id + "'");
    auto& slot = by_vital[s.vital_name];
    if (slot.empty()) slot.assign(ids.size(), nullptr);
    if (slot[it->second]) throw Error("duplicate vitals series for " + s.patient_id + " / " + s.vital_name);
    slot[it->second] = &s;
  }
  const std::string vprefix = fmt::format("v{}_", csv::format_number(cfg.vitals_window_hours));
  for (const auto& [vital, series] : by_vital) {
    ColumnValues mean(ids.size()), lo(ids.size()), hi(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!series[i]) continue;
      auto s = summarize_vitals(*series[i], cfg.vitals_window_hours);
      mean[i] = s.mean;
      lo[i] = s.min;
      hi[i] = s.max;
    }
    for (auto [suffix, values] : {std::pair{"mean", &mean}, {"min", &lo}, {"max", &hi}}) {
      std::string name = vprefix + vital + "_" + suffix;
      table.add_column({name, ColumnKind::continuous, std::move(*values)});
      out.vital_columns.push_back(name);
    }
  }

  auto keep = cfg.effective_keep_list();
  auto filtered = filter_high_missing_columns(table, cfg.missing_threshold, keep);
  out.dropped_columns = std::move(filtered.dropped);
  out.warnings = std::move(filtered.warnings);
  out.table = std::move(filtered.table);

  for (const auto& col : out.table.columns()) {
    if (!col.name.starts_with(cfg.lab_prefix) || col.kind != ColumnKind::continuous) continue;
    if (col.missing_count() == col.values.size()) continue;
    auto logged = log_transform_column(col.values);
    auto capped = winsorize_column(logged, cfg.winsor_percentile);
    std::size_t n_capped = 0;
    double cap = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < capped.size(); ++i) {
      if (!capped[i]) continue;
      cap = std::max(cap, *capped[i]);
      if (*capped[i] != *logged[i]) ++n_capped;
    }
    out.winsor_caps[col.name] = cap;
    out.winsorized[col.name] = n_capped;
    out.table.replace_values(col.name, std::move(capped));
  }
  return out;
}

namespace detail {

inline std::optional<double> raw_lab(const csv::Table& t, std::size_t col, std::size_t row) {
  return csv::parse_number(t.rows[row][col]);
}

}  // namespace detail

/// Arm per patient in patients.csv order, with the analysis' exclusions.
inline void assign_arms(const io::InputData& d, const PipelineConfig& cfg, AnalysisResult& res) {
  const auto& ids = res.prepared.table.patient_ids();
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of.emplace(ids[i], i);
  std::vector<std::vector<cohort::MedAdminEvent>> events(ids.size());
  for (const auto& ev : d.events) {
    auto it = row_of.find(ev.patient_id);
    if (it == row_of.end()) throw Error("med event for unknown patient '" + ev.patient_id + "'");
    events[it->second].push_back(ev);
  }

  res.arms.clear();
  res.flagged_doses = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    switch (cfg.analysis) {
      case Analysis::ac:
        res.arms.push_back(cohort::assign_ac_arm(ids[i], events[i], cfg.window_hours, cfg.allow_nonstandard_window));
        break;
      case Analysis::steroid: res.arms.push_back(cohort::assign_steroid_arm(ids[i], events[i], cfg.window_hours)); break;
      case Analysis::fxa: res.arms.push_back(cohort::assign_fxa_naive_arm(ids[i], events[i])); break;
    }
    if (res.arms.back().flagged) ++res.flagged_doses;
  }

  if (cfg.analysis == Analysis::ac) {
    auto col = d.patients.find(cfg.lab_prefix + "d_dimer");
    if (!col) throw Error("ac analysis needs a " + cfg.lab_prefix + "d_dimer column in patients.csv");
    std::vector<std::optional<double>> dd;
    dd.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) dd.push_back(detail::raw_lab(d.patients, *col, i));

    res.ddimer_bands.clear();
    for (const auto& b : synth::ddimer_bands(cfg.ddimer_cutoff)) res.ddimer_bands.push_back({b.label, b.lo, b.hi, 0, 0});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!dd[i] || res.arms[i].arm == cohort::Arm::excluded) continue;
      for (auto& band : res.ddimer_bands) {
        if (*dd[i] >= band.lo && *dd[i] < band.hi) {
          ++band.n;
          if (res.arms[i].arm == cohort::Arm::treated) ++band.n_treated;
        }
      }
    }
    res.arms = cohort::apply_ddimer_exclusion(res.arms, dd, cfg.ddimer_cutoff);
  }

  std::unordered_map<std::string, const cohort::OrganSupportRecord*> support;
  for (const auto& rec : d.support) support.emplace(rec.patient_id, &rec);
  res.osfd.clear();
  for (const auto& id : ids) {
    auto it = support.find(id);
    if (it == support.end()) throw Error("no outcome record for patient '" + id + "'");
    res.osfd.push_back(cohort::osfd21(*it->second));
  }
  res.reason_counts.clear();
  for (const auto& a : res.arms) ++res.reason_counts[a.reason];
}

/// Restricts to non-excluded, complete-case rows and builds the design matrix.
inline void build_design(AnalysisResult& res) {
  const auto& table = res.prepared.table;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < res.arms.size(); ++i)
    if (res.arms[i].arm != cohort::Arm::excluded) eligible.push_back(i);
  auto sub = table.select_rows(eligible);
  auto cc = preprocess::complete_cases(sub, sub.column_names());
  res.incomplete_ids = cc.dropped_ids;

  std::vector<std::size_t> rows;
  for (auto r : cc.retained_rows) rows.push_back(eligible[r]);
  res.ids.clear();
  res.treated.clear();
  res.y.clear();
  for (auto r : rows) {
    res.ids.push_back(table.patient_ids()[r]);
    res.treated.push_back(res.arms[r].arm == cohort::Arm::treated ? 1 : 0);
    res.y.push_back(res.osfd[r]);
  }
  if (res.ids.empty()) throw Error("no patients left after exclusions and complete-case filtering");
  if (res.n_treated() == 0 || res.n_control() == 0)
    throw Error(fmt::format("single-arm cohort: {} treated, {} control", res.n_treated(), res.n_control()));

  res.dropped_constant.clear();
  std::vector<const preprocess::Column*> keep;
  for (const auto& c : cc.table.columns()) {
    bool constant = true;
    for (const auto& v : c.values)
      if (*v != *c.values.front()) {
        constant = false;
        break;
      }
    if (constant)
      res.dropped_constant.push_back(c.name);
    else
      keep.push_back(&c);
  }
  for (const auto& n : res.dropped_constant) res.warnings.push_back("dropped constant covariate " + n);
  res.x.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(keep.size()));
  res.x.names.clear();
  for (std::size_t j = 0; j < keep.size(); ++j) {
    res.x.names.push_back(keep[j]->name);
    for (std::size_t i = 0; i < rows.size(); ++i)
      res.x.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = *keep[j]->values[i];
  }
}

inline void fit_propensity(AnalysisResult& res) {
  std::vector<double> t(res.treated.begin(), res.treated.end());
  glm::LogisticOptions opt;
  opt.ridge = res.config.ridge;
  try {
    res.propensity = glm::fit_logistic_irls(res.x, t, opt);
  } catch (const SeparationError& e) {
    throw Error(std::string(e.what()) + " (rerun with ridge = 1e-6 to regularise)");
  }
  res.ps = glm::predict_proba(res.propensity, res.x);
}

inline void match_and_balance(AnalysisResult& res) {
  const auto& c = res.config;
  std::vector<matching::ScoredUnit> tu, cu;
  for (std::size_t i = 0; i < res.ids.size(); ++i) (res.treated[i] ? tu : cu).push_back({res.ids[i], res.ps[i]});
  matching::MatchOptions mo{c.ratio, c.caliper, c.caliper_unit, c.replace};
  res.matched = matching::match_nearest_caliper(tu, cu, mo);
  if (res.matched.matches.empty()) throw Error("no treated patient has a control within the caliper");

  std::unordered_map<std::string, double> w;
  for (const auto& m : res.matched.matches) w[m.treated_id] = 1.0;
  for (const auto& [id, k] : res.matched.control_weights) w[id] = k;
  res.match_weights.clear();
  for (const auto& id : res.ids) {
    auto it = w.find(id);
    res.match_weights.push_back(it == w.end() ? 0.0 : it->second);
  }
  res.balance = matching::smd_balance(res.x, res.treated, res.match_weights);

  std::vector<double> pt, pc;
  for (std::size_t i = 0; i < res.ids.size(); ++i) (res.treated[i] ? pt : pc).push_back(res.ps[i]);
  res.hist = matching::overlap_histogram(pt, pc, c.hist_bins);
}

inline void estimate_effects(AnalysisResult& res) {
  const auto& c = res.config;
  res.effects.clear();
  res.effects.push_back(estimation::unadjusted_diff(res.y, res.treated));
  res.effects.push_back(estimation::regression_adjusted_att(res.x, res.treated, res.y));
  estimation::OutcomeLookup lookup;
  for (std::size_t i = 0; i < res.ids.size(); ++i) lookup.emplace(res.ids[i], res.y[i]);
  estimation::MatchedAttOptions mo;
  mo.variance = c.variance;
  mo.bootstrap_reps = c.bootstrap_reps;
  mo.seed = c.seed;
  res.effects.push_back(estimation::matched_att(res.matched, lookup, mo));
  res.correlation = estimation::treatment_outcome_correlation(res.y, res.treated);
  if (c.select_covariates)
    res.important = estimation::select_important_covariates(res.x, res.y, res.treated, c.seed, c.cv_folds);
}

namespace detail {

template <class F>
void run_stage(Stage stage, F&& f) {
  try {
    f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace detail

/// The whole analysis in memory. `hook`, when set, is called after each
/// stage completes.
inline AnalysisResult run_analysis(const io::InputData& data, const PipelineConfig& cfg, const StageHook& hook = {}) {
  cfg.validate();
  AnalysisResult res;
  res.config = cfg;
  auto done = [&](Stage s) {
    if (hook) hook(s, res);
  };
  detail::run_stage(Stage::preprocess, [&] { res.prepared = prepare_covariates(data, cfg); });
  res.warnings = res.prepared.warnings;
  done(Stage::preprocess);
  detail::run_stage(Stage::cohort, [&] {
    assign_arms(data, cfg, res);
    build_design(res);
  });
  if (res.flagged_doses)
    res.warnings.push_back(fmt::format("{} patients had subcutaneous heparin above {} units/day counted as therapeutic",
                                       res.flagged_doses, cohort::kHeparinProphylacticDailyUnits));
  done(Stage::cohort);
  detail::run_stage(Stage::propensity, [&] { fit_propensity(res); });
  done(Stage::propensity);
  detail::run_stage(Stage::matching, [&] { match_and_balance(res); });
  done(Stage::matching);
  detail::run_stage(Stage::estimation, [&] { estimate_effects(res); });
  done(Stage::estimation);
  return res;
}

// ---------------------------------------------------------------------------
// Artifacts

inline json estimate_json(Analysis a, const estimation::EffectEstimate& e) {
  return {{"analysis", analysis_name(a)},
          {"estimator", estimation::estimator_name(e.estimator)},
          {"point", e.point},
          {"se", e.se},
          {"ci95", {e.ci_lo, e.ci_hi}},
          {"n_treated", e.n_treated},
          {"n_control", e.n_control},
          {"p_value", e.p_value},
          {"variance", e.variance}};
}

inline json counts_json(const AnalysisResult& r) {
  json reasons = json::object();
  for (const auto& [k, v] : r.reason_counts) reasons[k] = v;
  return {{"patients", r.arms.size()},
          {"reasons", reasons},
          {"incomplete_covariates", r.incomplete_ids.size()},
          {"analysis_rows", r.ids.size()},
          {"treated", r.n_treated()},
          {"control", r.n_control()},
          {"matched_treated", r.matched.matches.size()},
          {"unmatched_treated", r.matched.dropped_treated.size()},
          {"matched_controls", r.matched.control_weights.size()},
          {"caliper_absolute", r.matched.caliper_used}};
}

inline json effects_json(const AnalysisResult& r) {
  json est = json::array();
  for (const auto& e : r.effects) est.push_back(estimate_json(r.config.analysis, e));
  json diag = {{"treatment_outcome_correlation", r.correlation},
               {"matched_fraction", r.matched.matched_fraction()},
               {"max_abs_smd_pre", matching::max_abs_smd(r.balance, false)},
               {"max_abs_smd_post", matching::max_abs_smd(r.balance, true)}};
  if (r.important) {
    std::vector<matching::BalanceRow> imp;
    for (const auto& b : r.balance)
      if (r.important->selected.count(b.covariate)) imp.push_back(b);
    diag["important_covariates"] = r.important->selected;
    diag["max_abs_smd_post_important"] = matching::max_abs_smd(imp, true);
  }
  return {{"version", kVersion},
          {"params", config_json(r.config)},
          {"metadata",
           {{"seed", r.config.seed},
            {"caliper", r.config.caliper},
            {"caliper_unit", matching::caliper_unit_name(r.config.caliper_unit)},
            {"window_hours", r.config.window_hours}}},
          {"estimates", est},
          {"counts", counts_json(r)},
          {"diagnostics", diag}};
}

inline void write_json(const fs::path& path, const json& j) {
  auto out = io::open_output(path);
  out << j.dump(2) << '\n';
}

inline void write_preprocess_artifacts(const fs::path& dir, const AnalysisResult& r) {
  const auto& p = r.prepared;
  {
    auto out = io::open_output(dir / "covariates.csv");
    out << "# " << params_line(r.config) << '\n';
    std::vector<std::string> header{"patient_id"};
    for (const auto& c : p.table.columns()) header.push_back(c.name);
    csv::write_row(out, header);
    for (std::size_t i = 0; i < p.table.rows(); ++i) {
      std::vector<std::string> row{p.table.patient_ids()[i]};
      for (const auto& c : p.table.columns()) row.push_back(csv::format_optional(c.values[i]));
      csv::write_row(out, row);
    }
  }
  json dropped = json::array();
  for (const auto& d : p.dropped_columns)
    dropped.push_back({{"column", d.name}, {"missing_fraction", d.missing_fraction}, {"reason", d.reason}});
  json encoded = json::array();
  for (const auto& e : p.encoded)
    encoded.push_back({{"source", e.source}, {"reference", e.reference_level}, {"columns", e.columns}});
  json labs = json::array();
  for (const auto& [name, cap] : p.winsor_caps)
    labs.push_back({{"column", name}, {"transform", "log1p"}, {"cap", cap}, {"winsorized", p.winsorized.at(name)}});
  write_json(dir / "preprocess_log.json", {{"params", config_json(r.config)},
                                           {"dropped_columns", dropped},
                                           {"encoded_categoricals", encoded},
                                           {"labs", labs},
                                           {"vital_columns", p.vital_columns},
                                           {"warnings", p.warnings}});
}

inline void write_cohort_artifacts(const fs::path& dir, const AnalysisResult& r) {
  {
    auto out = io::open_output(dir / fmt::format("cohort_{}.csv", analysis_name(r.config.analysis)));
    out << "# " << params_line(r.config) << '\n';
    csv::write_row(out, {"patient_id", "arm", "reason", "osfd21", "flagged"});
    for (std::size_t i = 0; i < r.arms.size(); ++i) {
      const auto& a = r.arms[i];
      csv::write_row(out, {a.patient_id, std::string(cohort::arm_name(a.arm)), a.reason, std::to_string(r.osfd[i]),
                           a.flagged ? "1" : "0"});
    }
  }
  // Rows dropped after arm assignment, appended to the preprocess log.
  auto path = dir / "preprocess_log.json";
  json log = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    log = json::parse(in);
  }
  log["dropped_rows"] = {{"incomplete_covariates", r.incomplete_ids}, {"constant_columns", r.dropped_constant}};
  write_json(path, log);

  if (r.config.analysis == Analysis::ac) {
    auto out = io::open_output(dir / "ddimer_treatment.csv");
    out << "# " << params_line(r.config) << '\n';
    csv::write_row(out, {"band", "lo", "hi", "n", "n_treated", "fraction_treated"});
    for (const auto& b : r.ddimer_bands)
      csv::write_row(out, {b.label, csv::format_number(b.lo), std::isfinite(b.hi) ? csv::format_number(b.hi) : "inf",
                           std::to_string(b.n), std::to_string(b.n_treated),
                           b.n ? csv::format_number(static_cast<double>(b.n_treated) / b.n) : "NA"});
  }
}

inline void write_matching_artifacts(const fs::path& dir, const AnalysisResult& r) {
  const auto comment = "# " + params_line(r.config) + '\n';
  {
    auto out = io::open_output(dir / "matched_pairs.csv");
    out << comment;
    csv::write_row(out, {"treated_id", "control_id", "distance", "weight"});
    for (const auto& m : r.matched.matches)
      for (std::size_t k = 0; k < m.control_ids.size(); ++k)
        csv::write_row(out, {m.treated_id, m.control_ids[k], csv::format_number(m.distances[k]),
                             csv::format_number(1.0 / static_cast<double>(m.control_ids.size()))});
  }
  {
    auto out = io::open_output(dir / "balance.csv");
    out << comment;
    csv::write_row(out, {"covariate", "smd_pre", "smd_post", "binary", "zero_variance"});
    for (const auto& b : r.balance)
      csv::write_row(out, {b.covariate, csv::format_number(b.smd_pre), csv::format_optional(b.smd_post),
                           b.binary ? "1" : "0", b.zero_variance ? "1" : "0"});
  }
  {
    auto out = io::open_output(dir / "propensity_hist.csv");
    out << comment;
    csv::write_row(out, {"bin_lo", "bin_hi", "n_treated", "n_control"});
    for (std::size_t b = 0; b + 1 < r.hist.edges.size(); ++b)
      csv::write_row(out, {csv::format_number(r.hist.edges[b]), csv::format_number(r.hist.edges[b + 1]),
                           std::to_string(r.hist.treated[b]), std::to_string(r.hist.control[b])});
  }
}

inline void write_estimation_artifacts(const fs::path& dir, const AnalysisResult& r) {
  write_json(dir / "effects.json", effects_json(r));
  if (r.important) {
    const auto& imp = *r.important;
    auto out = io::open_output(dir / "important_covariates.csv");
    out << "# " << params_line(r.config) << '\n';
    csv::write_row(out, {"covariate", "outcome_model", "treatment_model"});
    std::set<std::string> om(imp.outcome_model.begin(), imp.outcome_model.end());
    std::set<std::string> tm(imp.treatment_model.begin(), imp.treatment_model.end());
    for (const auto& c : imp.selected) csv::write_row(out, {c, om.count(c) ? "1" : "0", tm.count(c) ? "1" : "0"});
  }
}

inline json run_meta_json(const PipelineConfig& cfg, const AnalysisResult* r, const std::string& error = {},
                          std::optional<Stage> failed = std::nullopt) {
  json j = {{"version", kVersion}, {"params", config_json(cfg)}, {"seed", cfg.seed}};
  j["inputs"] = {io::kPatientsFile, io::kVitalsFile, io::kEventsFile, io::kSupportFile, io::kOutcomesFile};
  if (r) {
    j["counts"] = counts_json(*r);
    j["warnings"] = r->warnings;
    j["propensity"] = {{"iterations", r->propensity.convergence.iterations},
                       {"gradient_norm", r->propensity.convergence.gradient_norm},
                       {"covariates", r->x.names.size()}};
  }
  if (failed) {
    j["status"] = "failed";
    j["failed_stage"] = stage_name(*failed);
    j["error"] = error;
  } else {
    j["status"] = "ok";
  }
  return j;
}

struct RunReport {
  AnalysisResult result;
  fs::path out_dir;
};

/// Reads the inputs from cfg.data_dir, runs the analysis and writes every
/// artifact under cfg.out_dir. Failures are rethrown as StageError after a
/// run_meta.json recording the failed stage has been written.
inline RunReport run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  try {
    fs::create_directories(cfg.out_dir);
  } catch (const std::exception& e) {
    throw StageError(Stage::io, e.what());
  }
  io::InputData data;
  try {
    data = io::read_inputs(cfg.data_dir);
  } catch (const std::exception& e) {
    StageError err(Stage::io, e.what());
    write_json(cfg.out_dir / "run_meta.json", run_meta_json(cfg, nullptr, err.what(), Stage::io));
    throw err;
  }
  const AnalysisResult* last = nullptr;
  auto hook = [&](Stage s, const AnalysisResult& r) {
    last = &r;
    switch (s) {
      case Stage::preprocess: write_preprocess_artifacts(cfg.out_dir, r); break;
      case Stage::cohort: write_cohort_artifacts(cfg.out_dir, r); break;
      case Stage::matching: write_matching_artifacts(cfg.out_dir, r); break;
      case Stage::estimation: write_estimation_artifacts(cfg.out_dir, r); break;
      default: break;
    }
  };
  try {
    RunReport rep{run_analysis(data, cfg, hook), cfg.out_dir};
    write_json(cfg.out_dir / "run_meta.json", run_meta_json(cfg, &rep.result));
    return rep;
  } catch (const StageError& e) {
    write_json(cfg.out_dir / "run_meta.json", run_meta_json(cfg, last, e.what(), e.stage()));
    throw;
  }
}

// ---------------------------------------------------------------------------
// Report

struct ForestRow {
  std::string analysis;
  std::string estimator;
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// forest.csv and summary.md from one or more run directories.
inline std::vector<ForestRow> emit_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw StageError(Stage::report, "no run directories given");
  std::vector<json> runs;
  for (const auto& dir : run_dirs) {
    auto path = dir / "effects.json";
    std::ifstream in(path);
    if (!in) throw StageError(Stage::report, "missing " + path.string());
    try {
      runs.push_back(json::parse(in));
    } catch (const std::exception& e) {
      throw StageError(Stage::report, path.string() + ": " + e.what());
    }
  }
  std::vector<ForestRow> rows;
  std::ostringstream md;
  md << "# Treatment effect summary\n\n";
  std::vector<std::string> params;
  try {
    for (const auto& run : runs) {
      const auto& c = run.at("counts");
      const auto& p = run.at("params");
      const std::string analysis = p.at("analysis").get<std::string>();
      params.push_back(fmt::format("analysis={} seed={} window_hours={} caliper={} caliper_unit={} ratio={}", analysis,
                                   p.at("seed").get<std::uint64_t>(), p.at("window_hours").get<double>(),
                                   p.at("caliper").get<double>(), p.at("caliper_unit").get<std::string>(),
                                   p.at("ratio").get<int>()));
      md << "## " << analysis << "\n\n";
      md << "Parameters: " << params.back() << ", version " << run.at("version").get<std::string>() << ".\n\n";
      auto n_t = c.at("treated").get<std::size_t>();
      auto n_m = c.at("matched_treated").get<std::size_t>();
      auto n_u = c.at("unmatched_treated").get<std::size_t>();
      md << fmt::format("- Patients: {}; analysed after exclusions and complete cases: {} ({} treated, {} control).\n",
                        c.at("patients").get<std::size_t>(), c.at("analysis_rows").get<std::size_t>(), n_t,
                        c.at("control").get<std::size_t>());
      md << fmt::format("- Dropped for missing covariates: {}.\n", c.at("incomplete_covariates").get<std::size_t>());
      for (const auto& [reason, n] : c.at("reasons").items())
        md << fmt::format("- Arm reason `{}`: {}.\n", reason, n.get<std::size_t>());
      double frac = n_t ? static_cast<double>(n_m) / static_cast<double>(n_t) : 0.0;
      md << fmt::format("- Matched {} of {} treated ({:.1f}%); drop {} (approximately {:.0f}%) with no control within "
                        "the caliper.\n",
                        n_m, n_t, 100.0 * frac, n_u, n_t ? 100.0 * static_cast<double>(n_u) / n_t : 0.0);
      const auto& d = run.at("diagnostics");
      md << fmt::format("- Treatment-outcome correlation: {:.3f}; max |SMD| before matching {:.3f}, after {:.3f}.\n\n",
                        d.at("treatment_outcome_correlation").get<double>(), d.at("max_abs_smd_pre").get<double>(),
                        d.at("max_abs_smd_post").get<double>());
      md << "| estimator | point | 95% CI | p |\n|---|---|---|---|\n";
      for (const auto& e : run.at("estimates")) {
        ForestRow fr{analysis, e.at("estimator").get<std::string>(), e.at("point").get<double>(),
                     e.at("ci95").at(0).get<double>(), e.at("ci95").at(1).get<double>()};
        md << fmt::format("| {} | {:.2f} | [{:.2f}, {:.2f}] | {:.3f} |\n", fr.estimator, fr.point, fr.lo, fr.hi,
                          e.at("p_value").get<double>());
        rows.push_back(std::move(fr));
      }
      md << '\n';
    }
  } catch (const json::exception& e) {
    throw StageError(Stage::report, std::string("malformed effects.json: ") + e.what());
  }
  try {
    fs::create_directories(out_dir);
    auto out = io::open_output(out_dir / "forest.csv");
    for (const auto& p : params) out << "# params: " << p << '\n';
    csv::write_row(out, {"analysis", "estimator", "point", "lo", "hi"});
    for (const auto& r : rows)
      csv::write_row(out, {r.analysis, r.estimator, csv::format_number(r.point), csv::format_number(r.lo),
                           csv::format_number(r.hi)});
    auto s = io::open_output(out_dir / "summary.md");
    s << md.str();
  } catch (const std::exception& e) {
    throw StageError(Stage::report, e.what());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

struct SweepRow {
  double window_hours = 0.0;
  double caliper = 0.0;
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  double matched_fraction = 0.0;
  estimation::EffectEstimate matched;
};

inline std::vector<SweepRow> run_sweep(const io::InputData& data, PipelineConfig base, std::span<const double> windows,
                                       std::span<const double> calipers) {
  base.select_covariates = false;
  std::vector<SweepRow> rows;
  for (double w : windows) {
    for (double c : calipers) {
      PipelineConfig cfg = base;
      cfg.window_hours = w;
      cfg.caliper = c;
      auto r = run_analysis(data, cfg);
      rows.push_back({w, c, r.n_treated(), r.n_control(), r.matched.matched_fraction(),
                      r.effect(estimation::Estimator::matched)});
    }
  }
  return rows;
}

/// True when every pair of CIs shares at least one point.
inline bool cis_mutually_overlap(std::span<const SweepRow> rows) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      if (rows[i].matched.ci_lo > rows[j].matched.ci_hi || rows[j].matched.ci_lo > rows[i].matched.ci_hi) return false;
  return true;
}

inline void write_sweep(const fs::path& path, const PipelineConfig& base, std::span<const SweepRow> rows) {
  auto out = io::open_output(path);
  out << "# " << params_line(base) << '\n';
  csv::write_row(out, {"analysis", "window_hours", "caliper", "caliper_unit", "n_treated", "n_control",
                       "matched_fraction", "point", "se", "lo", "hi"});
  for (const auto& r : rows)
    csv::write_row(out, {std::string(analysis_name(base.analysis)), csv::format_number(r.window_hours),
                         csv::format_number(r.caliper), std::string(matching::caliper_unit_name(base.caliper_unit)),
                         std::to_string(r.n_treated), std::to_string(r.n_control),
                         csv::format_number(r.matched_fraction), csv::format_number(r.matched.point),
                         csv::format_number(r.matched.se), csv::format_number(r.matched.ci_lo),
                         csv::format_number(r.matched.ci_hi)});
}

}  // namespace cohortfx::pipeline
