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

// Outcome construction (organ-support-free days) and treatment-arm
// definitions for the anticoagulation, steroid and factor-XA analyses.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "cohortfx/error.hpp"

namespace cohortfx::cohort {

enum class Drug {
  heparin,
  enoxaparin,
  rivaroxaban,
  warfarin,
  dabigatran,
  apixaban,
  edoxaban,
  dexamethasone,
  hydrocortisone,
  prednisone,
};

enum class Route { intravenous, subcutaneous, oral };

inline constexpr std::array<std::pair<Drug, std::string_view>, 10> kDrugNames{{
    {Drug::heparin, "heparin"},
    {Drug::enoxaparin, "enoxaparin"},
    {Drug::rivaroxaban, "rivaroxaban"},
    {Drug::warfarin, "warfarin"},
    {Drug::dabigatran, "dabigatran"},
    {Drug::apixaban, "apixaban"},
    {Drug::edoxaban, "edoxaban"},
    {Drug::dexamethasone, "dexamethasone"},
    {Drug::hydrocortisone, "hydrocortisone"},
    {Drug::prednisone, "prednisone"},
}};

inline std::string_view drug_name(Drug d) {
  for (const auto& [drug, name] : kDrugNames)
    if (drug == d) return name;
  return "?";
}

inline Drug parse_drug(std::string_view s) {
  for (const auto& [drug, name] : kDrugNames)
    if (name == s) return drug;
  throw Error("unknown drug '" + std::string(s) + "'");
}

inline std::string_view route_name(Route r) {
  switch (r) {
    case Route::intravenous: return "intravenous";
    case Route::subcutaneous: return "subcutaneous";
    case Route::oral: return "oral";
  }
  return "?";
}

inline Route parse_route(std::string_view s) {
  if (s == "intravenous" || s == "iv") return Route::intravenous;
  if (s == "subcutaneous" || s == "sc") return Route::subcutaneous;
  if (s == "oral" || s == "po") return Route::oral;
  throw Error("unknown route '" + std::string(s) + "'");
}

inline bool is_anticoagulant(Drug d) {
  switch (d) {
    case Drug::heparin:
    case Drug::enoxaparin:
    case Drug::rivaroxaban:
    case Drug::warfarin:
    case Drug::dabigatran:
    case Drug::apixaban:
    case Drug::edoxaban: return true;
    default: return false;
  }
}

inline bool is_factor_xa_inhibitor(Drug d) {
  return d == Drug::rivaroxaban || d == Drug::apixaban || d == Drug::edoxaban;
}

inline bool is_steroid(Drug d) {
  return d == Drug::dexamethasone || d == Drug::hydrocortisone || d == Drug::prednisone;
}

/// One drug administration. Heparin doses are in units, everything else in mg.
struct MedAdminEvent {
  std::string patient_id;
  Drug drug = Drug::heparin;
  double dose = 0.0;
  Route route = Route::oral;
  double hours = 0.0;  // since admission

  void validate() const {
    if (hours < 0.0) throw Error(fmt::format("event for {}: negative timestamp {}", patient_id, hours));
    if (dose < 0.0) throw Error(fmt::format("event for {}: negative dose {}", patient_id, dose));
  }
};

// ---------------------------------------------------------------------------
// Outcome

inline constexpr int kOutcomeDays = 21;

struct OrganSupportRecord {
  std::string patient_id;
  std::set<int> support_days;  // 0-based calendar days with any organ support
  bool died = false;
  int observed_days = kOutcomeDays;

  void validate() const {
    if (!support_days.empty() && *support_days.begin() < 0)
      throw Error("organ support for " + patient_id + ": negative day index");
    if (observed_days < kOutcomeDays)
      throw Error(fmt::format("organ support for {}: observed {} days, need at least {}", patient_id,
                              observed_days, kOutcomeDays));
  }
};

/// 21 organ-support-free days: -1 on death, otherwise the count of days in
/// [0, 21) without pressors, renal replacement, high-flow oxygen or invasive
/// ventilation.
inline int osfd21(const OrganSupportRecord& rec) {
  rec.validate();
  if (rec.died) return -1;
  auto in_window = std::count_if(rec.support_days.begin(), rec.support_days.end(),
                                 [](int d) { return d < kOutcomeDays; });
  return kOutcomeDays - static_cast<int>(in_window);
}

// ---------------------------------------------------------------------------
// Anticoagulation dose levels

inline constexpr double kEnoxaparinTherapeuticMg = 60.0;
inline constexpr double kHeparinProphylacticDailyUnits = 15000.0;

enum class DoseClass { therapeutic, prophylactic, other };

inline std::string_view dose_class_name(DoseClass c) {
  switch (c) {
    case DoseClass::therapeutic: return "therapeutic";
    case DoseClass::prophylactic: return "prophylactic";
    case DoseClass::other: return "other";
  }
  return "?";
}

struct DoseClassification {
  DoseClass level = DoseClass::other;
  bool flagged = false;  // subcutaneous heparin above the prophylactic ceiling
};

/// Classifies one administration. `sc_heparin_daily_units` is the total
/// subcutaneous heparin given on the event's calendar day; it defaults to the
/// event's own dose.
inline DoseClassification classify_ac_dose(const MedAdminEvent& ev,
                                           std::optional<double> sc_heparin_daily_units = std::nullopt) {
  switch (ev.drug) {
    case Drug::heparin:
      if (ev.route == Route::intravenous) return {DoseClass::therapeutic, false};
      if (ev.route == Route::subcutaneous) {
        double total = sc_heparin_daily_units.value_or(ev.dose);
        if (total <= kHeparinProphylacticDailyUnits) return {DoseClass::prophylactic, false};
        return {DoseClass::therapeutic, true};
      }
      throw Error(fmt::format("heparin for {} with unsupported route '{}'", ev.patient_id,
                              route_name(ev.route)));
    case Drug::enoxaparin:
      return {ev.dose >= kEnoxaparinTherapeuticMg ? DoseClass::therapeutic : DoseClass::prophylactic,
              false};
    case Drug::rivaroxaban:
    case Drug::warfarin:
    case Drug::dabigatran: return {DoseClass::therapeutic, false};
    default: return {DoseClass::other, false};
  }
}

inline int calendar_day(double hours) { return static_cast<int>(std::floor(hours / 24.0)); }

/// Classifies every event of one patient, summing subcutaneous heparin per
/// calendar day from admission.
inline std::vector<DoseClassification> classify_ac_doses(std::span<const MedAdminEvent> events) {
  std::map<int, double> sc_heparin;
  for (const auto& ev : events)
    if (ev.drug == Drug::heparin && ev.route == Route::subcutaneous)
      sc_heparin[calendar_day(ev.hours)] += ev.dose;
  std::vector<DoseClassification> out;
  out.reserve(events.size());
  for (const auto& ev : events) {
    std::optional<double> total;
    if (ev.drug == Drug::heparin && ev.route == Route::subcutaneous) total = sc_heparin[calendar_day(ev.hours)];
    out.push_back(classify_ac_dose(ev, total));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Arms

enum class Arm { treated, control, excluded };

inline std::string_view arm_name(Arm a) {
  switch (a) {
    case Arm::treated: return "treated";
    case Arm::control: return "control";
    case Arm::excluded: return "excluded";
  }
  return "?";
}

namespace reason {
inline constexpr std::string_view therapeutic = "therapeutic-in-window";
inline constexpr std::string_view prophylactic = "prophylactic-in-window";
inline constexpr std::string_view mixed = "mixed-dose-window";
inline constexpr std::string_view no_ac = "no-ac-in-window";
inline constexpr std::string_view ddimer_high = "ddimer-high";
inline constexpr std::string_view ddimer_missing = "ddimer-missing";
inline constexpr std::string_view steroid = "steroid-in-window";
inline constexpr std::string_view no_steroid = "no-steroid-in-window";
inline constexpr std::string_view fxa = "fxa-any-time";
inline constexpr std::string_view no_fxa = "no-fxa";
}  // namespace reason

struct ArmAssignment {
  std::string patient_id;
  Arm arm = Arm::excluded;
  std::string reason;
  bool flagged = false;  // a dose needed the above-ceiling heparin rule
};

inline constexpr std::array<double, 4> kStandardWindows{24.0, 48.0, 72.0, 96.0};

/// Therapeutic-only in window -> treated, prophylactic-only -> control, both
/// -> excluded(mixed), neither -> excluded(no AC). Events may belong to one
/// patient only.
inline ArmAssignment assign_ac_arm(std::string_view patient_id, std::span<const MedAdminEvent> events,
                                   double window_hours = 72.0, bool allow_nonstandard_window = false) {
  if (!allow_nonstandard_window &&
      std::find(kStandardWindows.begin(), kStandardWindows.end(), window_hours) == kStandardWindows.end())
    throw Error(fmt::format("window {}h is not one of 24/48/72/96 (pass allow_nonstandard_window)",
                            window_hours));
  auto classes = classify_ac_doses(events);
  bool therapeutic = false, prophylactic = false, flagged = false;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].hours > window_hours) continue;
    if (classes[i].level == DoseClass::therapeutic) therapeutic = true;
    if (classes[i].level == DoseClass::prophylactic) prophylactic = true;
    flagged = flagged || classes[i].flagged;
  }
  ArmAssignment a{std::string(patient_id), Arm::excluded, {}, flagged};
  if (therapeutic && prophylactic) {
    a.reason = reason::mixed;
  } else if (therapeutic) {
    a.arm = Arm::treated;
    a.reason = reason::therapeutic;
  } else if (prophylactic) {
    a.arm = Arm::control;
    a.reason = reason::prophylactic;
  } else {
    a.reason = reason::no_ac;
  }
  return a;
}

inline constexpr double kDdimerCutoff = 3000.0;

/// Excludes patients whose baseline D-dimer is at or above `cutoff` (ng/mL)
/// or missing. `ddimer` is aligned with `assignments`.
inline std::vector<ArmAssignment> apply_ddimer_exclusion(std::span<const ArmAssignment> assignments,
                                                         std::span<const std::optional<double>> ddimer,
                                                         double cutoff = kDdimerCutoff) {
  if (!(cutoff > 0.0)) throw Error("apply_ddimer_exclusion: cutoff must be positive");
  if (ddimer.size() != assignments.size()) throw Error("apply_ddimer_exclusion: size mismatch");
  std::vector<ArmAssignment> out(assignments.begin(), assignments.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].arm == Arm::excluded) continue;
    if (!ddimer[i]) {
      out[i].arm = Arm::excluded;
      out[i].reason = reason::ddimer_missing;
    } else if (*ddimer[i] >= cutoff) {
      out[i].arm = Arm::excluded;
      out[i].reason = reason::ddimer_high;
    }
  }
  return out;
}

/// Dexamethasone, hydrocortisone or prednisone at or before `window_hours`.
inline ArmAssignment assign_steroid_arm(std::string_view patient_id, std::span<const MedAdminEvent> events,
                                        double window_hours = 72.0) {
  bool treated = std::any_of(events.begin(), events.end(), [&](const MedAdminEvent& ev) {
    return is_steroid(ev.drug) && ev.hours <= window_hours;
  });
  return {std::string(patient_id), treated ? Arm::treated : Arm::control,
          std::string(treated ? reason::steroid : reason::no_steroid), false};
}

/// "Ever received a factor-XA inhibitor" with no time window. This is the
/// naive definition whose discharge-timing artifact the fxa scenario probes.
inline ArmAssignment assign_fxa_naive_arm(std::string_view patient_id, std::span<const MedAdminEvent> events) {
  bool treated = std::any_of(events.begin(), events.end(),
                             [](const MedAdminEvent& ev) { return is_factor_xa_inhibitor(ev.drug); });
  return {std::string(patient_id), treated ? Arm::treated : Arm::control,
          std::string(treated ? reason::fxa : reason::no_fxa), false};
}

}  // namespace cohortfx::cohort
