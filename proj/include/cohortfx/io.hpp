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

// Readers and writers for the raw input tables:
//   patients.csv       patient_id, <covariates...>
//   vitals.csv         patient_id, vital_name, hours_since_admission, value
//   med_events.csv     patient_id, drug, dose, units, route, hours_since_admission
//   organ_support.csv  patient_id, day_index, support_type
//   outcomes.csv       patient_id, died, observed_days

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "cohortfx/cohort.hpp"
#include "cohortfx/csv.hpp"
#include "cohortfx/error.hpp"
#include "cohortfx/preprocess.hpp"

namespace cohortfx::io {

namespace fs = std::filesystem;

inline constexpr std::string_view kPatientsFile = "patients.csv";
inline constexpr std::string_view kVitalsFile = "vitals.csv";
inline constexpr std::string_view kEventsFile = "med_events.csv";
inline constexpr std::string_view kSupportFile = "organ_support.csv";
inline constexpr std::string_view kOutcomesFile = "outcomes.csv";

inline constexpr std::array<std::string_view, 4> kSupportTypes{"vasopressors", "renal_replacement",
                                                               "high_flow_oxygen", "invasive_ventilation"};

struct InputData {
  csv::Table patients;                          // raw strings, first column patient_id
  std::vector<preprocess::VitalsSeries> vitals;  // one series per (patient, vital)
  std::vector<cohort::MedAdminEvent> events;
  std::vector<cohort::OrganSupportRecord> support;  // one per patient, merged with outcomes
};

inline std::string dose_units(cohort::Drug d) { return d == cohort::Drug::heparin ? "units" : "mg"; }

namespace detail {

inline std::string where(std::string_view file, std::size_t row) { return fmt::format("{} row {}", file, row + 1); }

inline double require_number(std::string_view file, std::size_t row, std::string_view field, const std::string& s) {
  std::optional<double> v;
  try {
    v = csv::parse_number(s);
  } catch (const Error&) {
    throw Error(fmt::format("{}: {} is not a number: '{}'", where(file, row), field, s));
  }
  if (!v) throw Error(fmt::format("{}: {} is empty", where(file, row), field));
  return *v;
}

inline int require_int(std::string_view file, std::size_t row, std::string_view field, const std::string& s) {
  double v = require_number(file, row, field, s);
  if (v != std::floor(v)) throw Error(fmt::format("{}: {} must be an integer, got '{}'", where(file, row), field, s));
  return static_cast<int>(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parsing

inline void validate_patients(const csv::Table& t) {
  if (t.header.empty() || t.header.front() != "patient_id")
    throw Error(std::string(kPatientsFile) + ": first column must be patient_id");
  std::set<std::string> ids;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& id = t.rows[r][0];
    if (id.empty()) throw Error(detail::where(kPatientsFile, r) + ": empty patient_id");
    if (!ids.insert(id).second) throw Error(detail::where(kPatientsFile, r) + ": duplicate patient_id " + id);
  }
}

inline std::vector<preprocess::VitalsSeries> parse_vitals(const csv::Table& t) {
  const auto ci = t.column("patient_id"), cn = t.column("vital_name"), ch = t.column("hours_since_admission"),
             cv = t.column("value");
  std::map<std::pair<std::string, std::string>, std::vector<preprocess::VitalReading>> grouped;
  std::vector<std::pair<std::string, std::string>> order;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    std::pair key{row[ci], row[cn]};
    if (key.second.empty()) throw Error(detail::where(kVitalsFile, r) + ": empty vital_name");
    auto value = csv::parse_number(row[cv]);
    if (!value) continue;  // a blank reading carries no information
    auto [it, fresh] = grouped.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(
        {detail::require_number(kVitalsFile, r, "hours_since_admission", row[ch]), *value});
  }
  std::vector<preprocess::VitalsSeries> out;
  for (const auto& key : order)
    out.push_back(preprocess::VitalsSeries::make(key.first, key.second, std::move(grouped[key])));
  return out;
}

inline std::vector<cohort::MedAdminEvent> parse_events(const csv::Table& t) {
  const auto ci = t.column("patient_id"), cd = t.column("drug"), cdose = t.column("dose"), cu = t.column("units"),
             cr = t.column("route"), ch = t.column("hours_since_admission");
  std::vector<cohort::MedAdminEvent> out;
  out.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    cohort::MedAdminEvent ev;
    ev.patient_id = row[ci];
    try {
      ev.drug = cohort::parse_drug(row[cd]);
      ev.route = cohort::parse_route(row[cr]);
    } catch (const Error& e) {
      throw Error(detail::where(kEventsFile, r) + ": " + e.what());
    }
    ev.dose = detail::require_number(kEventsFile, r, "dose", row[cdose]);
    ev.hours = detail::require_number(kEventsFile, r, "hours_since_admission", row[ch]);
    if (row[cu] != dose_units(ev.drug))
      throw Error(fmt::format("{}: {} dose must be in {}, got '{}'", detail::where(kEventsFile, r),
                              cohort::drug_name(ev.drug), dose_units(ev.drug), row[cu]));
    try {
      ev.validate();
    } catch (const Error& e) {
      throw Error(detail::where(kEventsFile, r) + ": " + e.what());
    }
    out.push_back(std::move(ev));
  }
  return out;
}

/// Merges organ_support.csv rows into the outcomes.csv records. Support rows
/// for a patient without an outcome row are an error.
inline std::vector<cohort::OrganSupportRecord> parse_support(const csv::Table& support, const csv::Table& outcomes) {
  const auto oi = outcomes.column("patient_id"), od = outcomes.column("died"),
             oo = outcomes.column("observed_days");
  std::vector<cohort::OrganSupportRecord> out;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < outcomes.rows.size(); ++r) {
    const auto& row = outcomes.rows[r];
    int died = detail::require_int(kOutcomesFile, r, "died", row[od]);
    if (died != 0 && died != 1) throw Error(detail::where(kOutcomesFile, r) + ": died must be 0 or 1");
    cohort::OrganSupportRecord rec{row[oi], {}, died == 1,
                                   detail::require_int(kOutcomesFile, r, "observed_days", row[oo])};
    if (!index.emplace(rec.patient_id, out.size()).second)
      throw Error(detail::where(kOutcomesFile, r) + ": duplicate patient_id " + rec.patient_id);
    out.push_back(std::move(rec));
  }
  const auto si = support.column("patient_id"), sd = support.column("day_index"),
             st = support.column("support_type");
  for (std::size_t r = 0; r < support.rows.size(); ++r) {
    const auto& row = support.rows[r];
    auto it = index.find(row[si]);
    if (it == index.end())
      throw Error(detail::where(kSupportFile, r) + ": patient " + row[si] + " has no outcomes row");
    if (std::find(kSupportTypes.begin(), kSupportTypes.end(), row[st]) == kSupportTypes.end())
      throw Error(detail::where(kSupportFile, r) + ": unknown support_type '" + row[st] + "'");
    int day = detail::require_int(kSupportFile, r, "day_index", row[sd]);
    if (day < 0) throw Error(detail::where(kSupportFile, r) + ": negative day_index");
    out[it->second].support_days.insert(day);
  }
  for (const auto& rec : out) rec.validate();
  return out;
}

inline InputData read_inputs(const fs::path& dir) {
  InputData d;
  d.patients = csv::read(dir / kPatientsFile);
  validate_patients(d.patients);
  try {
    d.vitals = parse_vitals(csv::read(dir / kVitalsFile));
  } catch (const Error& e) {
    throw Error((dir / kVitalsFile).string() + ": " + e.what());
  }
  d.events = parse_events(csv::read(dir / kEventsFile));
  d.support = parse_support(csv::read(dir / kSupportFile), csv::read(dir / kOutcomesFile));
  return d;
}

// ---------------------------------------------------------------------------
// Writing

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

inline void write_table(const fs::path& path, const csv::Table& t, std::string_view comment = {}) {
  auto out = open_output(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  csv::write_row(out, t.header);
  for (const auto& r : t.rows) csv::write_row(out, r);
}

/// Support types written for a day; the calendar only records which days had
/// support, so two types are written on some days to exercise once-per-day
/// counting downstream.
inline std::vector<std::string_view> support_types_for_day(int day) {
  if (day % 3 == 0) return {kSupportTypes[2], kSupportTypes[0]};
  if (day % 5 == 1) return {kSupportTypes[3]};
  return {kSupportTypes[2]};
}

inline void write_inputs(const fs::path& dir, const InputData& d) {
  fs::create_directories(dir);
  write_table(dir / kPatientsFile, d.patients);
  {
    auto out = open_output(dir / kVitalsFile);
    csv::write_row(out, {"patient_id", "vital_name", "hours_since_admission", "value"});
    for (const auto& s : d.vitals)
      for (const auto& r : s.readings)
        csv::write_row(out, {s.patient_id, s.vital_name, csv::format_number(r.hours), csv::format_number(r.value)});
  }
  {
    auto out = open_output(dir / kEventsFile);
    csv::write_row(out, {"patient_id", "drug", "dose", "units", "route", "hours_since_admission"});
    for (const auto& e : d.events)
      csv::write_row(out, {e.patient_id, std::string(cohort::drug_name(e.drug)), csv::format_number(e.dose),
                           dose_units(e.drug), std::string(cohort::route_name(e.route)),
                           csv::format_number(e.hours)});
  }
  {
    auto sup = open_output(dir / kSupportFile);
    auto outc = open_output(dir / kOutcomesFile);
    csv::write_row(sup, {"patient_id", "day_index", "support_type"});
    csv::write_row(outc, {"patient_id", "died", "observed_days"});
    for (const auto& rec : d.support) {
      for (int day : rec.support_days)
        for (auto type : support_types_for_day(day))
          csv::write_row(sup, {rec.patient_id, std::to_string(day), std::string(type)});
      csv::write_row(outc, {rec.patient_id, rec.died ? "1" : "0", std::to_string(rec.observed_days)});
    }
  }
}

}  // namespace cohortfx::io
