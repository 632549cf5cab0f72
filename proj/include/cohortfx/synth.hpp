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

// Synthetic hospital cohorts with known treatment effects.
//
// Every patient is drawn from its own counter-based RNG stream, so patient i
// is identical whatever n is. Treatment and outcome models are linear in the
// *analysis-scale* covariates (log1p labs, 24h vital summaries), so the
// only confounding left after adjustment is what a scenario puts there on
// purpose: the fxa scenario's latent recovery variable.
//
// Outcome: latent L = b0 + sum(terms) + effect * T + latent_coef * R + e,
// reported as clamp(floor(L), -1, 21) organ-support-free days; L < 0 is death.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "cohortfx/cohort.hpp"
#include "cohortfx/csv.hpp"
#include "cohortfx/error.hpp"
#include "cohortfx/io.hpp"
#include "cohortfx/preprocess.hpp"
#include "cohortfx/rng.hpp"

namespace cohortfx::synth {

enum class ScenarioName { ac, steroid, fxa, custom };
enum class TreatmentKind { aggressive_ac, steroid, fxa };

NLOHMANN_JSON_SERIALIZE_ENUM(ScenarioName, {{ScenarioName::ac, "ac"},
                                            {ScenarioName::steroid, "steroid"},
                                            {ScenarioName::fxa, "fxa"},
                                            {ScenarioName::custom, "custom"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TreatmentKind, {{TreatmentKind::aggressive_ac, "aggressive_ac"},
                                             {TreatmentKind::steroid, "steroid"},
                                             {TreatmentKind::fxa, "fxa"}})

inline ScenarioName parse_scenario(std::string_view s) {
  if (s == "ac") return ScenarioName::ac;
  if (s == "steroid") return ScenarioName::steroid;
  if (s == "fxa") return ScenarioName::fxa;
  throw Error("unknown scenario '" + std::string(s) + "' (expected ac, steroid or fxa)");
}

// ---------------------------------------------------------------------------
// Covariate model

struct CategoricalSpec {
  std::string name;
  std::vector<std::string> levels;
  std::vector<double> probs;
};

/// P(x = 1) = sigmoid(base + age_slope * age_std + severity_slope * S
///                    + parent_shift * parent)
struct BinarySpec {
  std::string name;
  double base_logit = -2.0;
  double age_slope = 0.0;
  double severity_slope = 0.0;
  std::string parent;  // optional earlier binary covariate
  double parent_shift = 0.0;
  int charlson_points = 0;
};

/// log1p(raw) = log_mean + log_sd * (loading * S + sqrt(1 - loading^2) * e)
struct LabSpec {
  std::string name;  // without the lab prefix
  double log_mean = 0.0;
  double log_sd = 1.0;
  double loading = 0.0;
  double missing_fraction = 0.0;
  double outlier_fraction = 0.003;  // recorded value multiplied by outlier_factor
};

struct VitalSpec {
  std::string name;
  double mean = 0.0;
  double sd = 1.0;
  double loading = 0.0;
  double reading_sd = 1.0;
  std::optional<double> max_value;
};

struct CovariateModel {
  double age_mean = 62.0;
  double age_sd = 16.0;
  double male_fraction = 0.58;
  double severity_age_loading = 0.3;
  std::vector<CategoricalSpec> categoricals;
  std::vector<BinarySpec> comorbidities;
  std::vector<BinarySpec> medications;
  std::vector<LabSpec> labs;
  std::vector<VitalSpec> vitals;
  double outlier_factor = 25.0;
  double reading_interval_hours = 4.0;
  int readings = 9;
};

/// coef * (x - center) / scale, with x named by its analysis column. A hinge
/// term is coef * max(0, (x - center) / scale).
struct LinearTerm {
  std::string covariate;
  double coef = 0.0;
  double center = 0.0;
  double scale = 1.0;
  bool hinge = false;
};

struct AssignmentModel {
  double intercept = 0.0;
  std::vector<LinearTerm> terms;
  double latent_coef = 0.0;            // on the unobserved recovery variable R
  double ddimer_high_probability = 0;  // aggressive_ac: P(treated | D-dimer >= cutoff)
};

struct OutcomeModel {
  double intercept = 10.0;
  std::vector<LinearTerm> terms;
  double treatment_effect = 0.0;  // on the latent scale
  double latent_coef = 0.0;       // on R
  double noise_sd = 4.5;
};

/// Drug-regimen knobs shared by all scenarios.
struct RegimenModel {
  double ac_fraction = 0.92;          // receive any anticoagulant
  double first_dose_median_hours = 8.0;
  double first_dose_log_sd = 0.8;
  double switch_fraction = 0.18;      // change AC level 12-110h after the first dose
  double background_therapeutic = 0.2;  // AC level when AC is not the studied treatment
  double rivaroxaban_share = 0.08;    // of therapeutic regimens
  double high_sc_heparin_share = 0.02;  // therapeutic via > 15000 units/day subcutaneous
  double late_steroid_fraction = 0.12;  // controls started on steroids after the window
  double fxa_home_continuation = 0.3;   // treated fxa with home anticoagulants start early
};

struct ScenarioSpec {
  ScenarioName name = ScenarioName::custom;
  TreatmentKind treatment = TreatmentKind::steroid;
  int n = 2282;
  CovariateModel covariates;
  AssignmentModel assignment;
  OutcomeModel outcome;
  RegimenModel regimen;
  double ddimer_cutoff = 3000.0;
  double target_prevalence = 0.0;  // what assignment.intercept was calibrated to
  double true_att = 0.0;           // nominal ATT on the reported (clipped) scale
  std::string lab_prefix = "l36_";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CategoricalSpec, name, levels, probs)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BinarySpec, name, base_logit, age_slope, severity_slope, parent, parent_shift,
                                   charlson_points)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LabSpec, name, log_mean, log_sd, loading, missing_fraction, outlier_fraction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LinearTerm, covariate, coef, center, scale, hinge)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AssignmentModel, intercept, terms, latent_coef, ddimer_high_probability)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(OutcomeModel, intercept, terms, treatment_effect, latent_coef, noise_sd)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RegimenModel, ac_fraction, first_dose_median_hours, first_dose_log_sd,
                                   switch_fraction, background_therapeutic, rivaroxaban_share,
                                   high_sc_heparin_share, late_steroid_fraction, fxa_home_continuation)

inline void to_json(nlohmann::json& j, const VitalSpec& v) {
  j = {{"name", v.name}, {"mean", v.mean}, {"sd", v.sd}, {"loading", v.loading}, {"reading_sd", v.reading_sd}};
  if (v.max_value) j["max_value"] = *v.max_value;
}
inline void from_json(const nlohmann::json& j, VitalSpec& v) {
  j.at("name").get_to(v.name);
  j.at("mean").get_to(v.mean);
  j.at("sd").get_to(v.sd);
  j.at("loading").get_to(v.loading);
  j.at("reading_sd").get_to(v.reading_sd);
  if (j.contains("max_value")) v.max_value = j.at("max_value").get<double>();
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CovariateModel, age_mean, age_sd, male_fraction, severity_age_loading,
                                   categoricals, comorbidities, medications, labs, vitals, outlier_factor,
                                   reading_interval_hours, readings)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ScenarioSpec, name, treatment, n, covariates, assignment, outcome, regimen,
                                   ddimer_cutoff, target_prevalence, true_att, lab_prefix)

// ---------------------------------------------------------------------------
// Default scenarios

inline CovariateModel default_covariate_model() {
  CovariateModel m;
  m.categoricals = {
      {"race_ethnicity", {"white", "black", "hispanic", "asian_other"}, {0.38, 0.24, 0.26, 0.12}},
      {"smoking_status", {"never", "former", "current"}, {0.58, 0.30, 0.12}},
  };
  m.comorbidities = {
      {"cm_mi", -2.3, 0.6, 0.1, "", 0, 1},          {"cm_chf", -2.1, 0.7, 0.2, "", 0, 1},
      {"cm_vascular", -2.2, 0.5, 0.0, "", 0, 1},    {"cm_dementia", -2.6, 1.0, 0.0, "", 0, 1},
      {"cm_pulmonary", -1.7, 0.2, 0.2, "", 0, 1},   {"cm_rheumatoid", -2.5, 0.1, 0.0, "", 0, 1},
      {"cm_peptic_ulcer", -2.5, 0.2, 0.0, "", 0, 1}, {"cm_diabetes", -0.9, 0.4, 0.1, "", 0, 1},
      {"cm_cancer", -2.2, 0.5, 0.1, "", 0, 2},      {"cm_liver", -2.5, 0.0, 0.1, "", 0, 1},
      {"cm_hiv", -2.5, -0.3, 0.0, "", 0, 6},
  };
  m.medications = {
      {"meds_analgesics", -1.1, 0.2, 0.0, "", 0, 0},
      {"meds_antibiotics", -1.6, 0.0, 0.1, "", 0, 0},
      {"meds_anticoagulants", -2.2, 0.8, 0.0, "cm_vascular", 1.0, 0},
      {"meds_antihyperglycemics", -3.0, 0.0, 0.0, "cm_diabetes", 3.6, 0},
      {"meds_antiplatelet", -1.6, 0.7, 0.0, "cm_mi", 1.5, 0},
      {"meds_cardiovascular", -0.5, 0.9, 0.0, "cm_chf", 1.5, 0},
      {"meds_cns", -1.8, 0.1, 0.0, "", 0, 0},
      {"meds_diuretics", -1.7, 0.7, 0.0, "cm_chf", 1.5, 0},
      {"meds_gastrointestinal", -1.4, 0.3, 0.0, "cm_peptic_ulcer", 1.0, 0},
      {"meds_hormones", -2.2, 0.2, 0.0, "", 0, 0},
      {"meds_immunosuppressants", -2.8, 0.0, 0.0, "cm_rheumatoid", 2.0, 0},
      {"meds_psychotherapeutic", -1.7, 0.0, 0.0, "cm_dementia", 0.8, 0},
      {"meds_thyroid", -2.3, 0.4, 0.0, "", 0, 0},
  };
  m.labs = {
      {"albumin", 1.50, 0.08, -0.40, 0.00},      {"alkaline_phosphatase", 4.40, 0.35, 0.10, 0.00},
      {"alt", 3.60, 0.60, 0.20, 0.00},           {"ast", 3.80, 0.55, 0.35, 0.00},
      {"bilirubin", 0.45, 0.25, 0.15, 0.00},     {"bun", 2.95, 0.55, 0.45, 0.00},
      {"crp", 4.40, 0.90, 0.55, 0.00},           {"calcium", 2.28, 0.06, -0.20, 0.00},
      {"chloride", 4.63, 0.04, 0.00, 0.00},      {"creatinine", 0.70, 0.35, 0.35, 0.00},
      {"d_dimer", 6.80, 0.95, 0.45, 0.25},       {"eosinophils", 0.35, 0.35, -0.20, 0.00},
      {"ferritin", 6.40, 0.90, 0.40, 0.04},      {"hematocrit", 3.68, 0.12, -0.10, 0.00},
      {"ldh", 5.85, 0.40, 0.55, 0.03},           {"lymphocytes", 2.70, 0.45, -0.45, 0.00},
      {"platelet_volume", 2.44, 0.08, 0.10, 0.00}, {"monocytes", 2.05, 0.35, -0.10, 0.00},
      {"neutrophils", 4.30, 0.12, 0.40, 0.00},   {"potassium", 1.61, 0.08, 0.10, 0.00},
      {"protein", 2.08, 0.07, -0.10, 0.00},      {"prothrombin_time", 2.67, 0.10, 0.20, 0.00},
      {"sodium", 4.93, 0.03, -0.05, 0.00},       {"wbc", 2.10, 0.40, 0.30, 0.00},
      {"procalcitonin", 0.26, 0.40, 0.40, 0.35},
  };
  m.vitals = {
      {"heart_rate", 90.0, 14.0, 0.35, 8.0, std::nullopt},
      {"o2_sat", 94.0, 3.0, -0.55, 1.5, 100.0},
      {"sbp", 128.0, 18.0, -0.10, 10.0, std::nullopt},
      {"temperature", 37.4, 0.7, 0.30, 0.3, std::nullopt},
      {"resp_rate", 21.0, 4.0, 0.50, 2.0, std::nullopt},
  };
  return m;
}

/// Standardising constants of an analysis column under `m`.
inline LinearTerm term(const CovariateModel& m, std::string_view covariate, double coef,
                       std::string_view lab_prefix = "l36_") {
  LinearTerm t{std::string(covariate), coef, 0.0, 1.0};
  if (covariate == "age") {
    t.center = m.age_mean;
    t.scale = m.age_sd;
    return t;
  }
  if (covariate == "charlson") {
    t.center = 2.5;
    t.scale = 2.0;
    return t;
  }
  for (const auto& lab : m.labs) {
    if (covariate == std::string(lab_prefix) + lab.name) {
      t.center = lab.log_mean;
      t.scale = lab.log_sd;
      return t;
    }
  }
  for (const auto& v : m.vitals) {
    if (covariate.starts_with("v24_" + v.name + "_")) {
      t.center = v.mean;
      t.scale = v.sd;
      return t;
    }
  }
  return t;  // binary: raw 0/1
}

/// Hinge on `covariate` with the knot `knot_sd` standard deviations above
/// its center.
inline LinearTerm hinge_term(const CovariateModel& m, std::string_view covariate, double coef, double knot_sd) {
  LinearTerm t = term(m, covariate, coef);
  t.center += knot_sd * t.scale;
  t.hinge = true;
  return t;
}

inline std::vector<LinearTerm> default_outcome_terms(const CovariateModel& m, bool include_ddimer) {
  std::vector<LinearTerm> t = {
      term(m, "age", -1.0),
      term(m, "charlson", -0.4),
      term(m, "l36_crp", -1.0),
      term(m, "l36_ldh", -0.7),
      term(m, "l36_bun", -0.7),
      term(m, "l36_lymphocytes", 0.5),
      term(m, "l36_albumin", 0.4),
      term(m, "v24_o2_sat_mean", 1.0),
      term(m, "v24_resp_rate_mean", -0.8),
      term(m, "cm_chf", -1.0),
      term(m, "meds_immunosuppressants", -0.8),
  };
  if (include_ddimer) t.push_back(term(m, "l36_d_dimer", -0.9));
  return t;
}

// Intercepts and the steroid latent effect below were calibrated with
// calibrate_assignment_intercept / calibrate_latent_effect (see the
// `cohortfx calibrate` command) on 2,000,000 draws.
inline constexpr double kAcIntercept = -3.0546;
inline constexpr double kSteroidIntercept = -3.4289;
inline constexpr double kSteroidLatentEffect = 1.5275;
inline constexpr double kFxaIntercept = -4.4796;

inline ScenarioSpec make_scenario(ScenarioName name, int n = 0) {
  ScenarioSpec s;
  s.name = name;
  s.covariates = default_covariate_model();
  const auto& m = s.covariates;
  switch (name) {
    case ScenarioName::ac:
      s.treatment = TreatmentKind::aggressive_ac;
      s.n = 2282;
      s.target_prevalence = 0.23;
      s.true_att = 0.0;
      s.assignment.intercept = kAcIntercept;
      s.assignment.ddimer_high_probability = 0.985;
      s.assignment.terms = {
          term(m, "l36_d_dimer", 3.0),       term(m, "l36_crp", 0.5),
          term(m, "v24_o2_sat_mean", -0.4),  term(m, "l36_prothrombin_time", 0.3),
          term(m, "meds_anticoagulants", 7.0),
      };
      s.outcome.terms = default_outcome_terms(m, true);
      break;
    case ScenarioName::steroid:
      s.treatment = TreatmentKind::steroid;
      s.n = 2282;
      s.target_prevalence = 190.0 / 2282.0;
      s.true_att = 1.35;
      s.assignment.intercept = kSteroidIntercept;
      s.assignment.terms = {
          term(m, "l36_crp", 0.7),           term(m, "v24_o2_sat_mean", -0.7),
          term(m, "v24_resp_rate_mean", 0.5), term(m, "l36_ldh", 0.4),
          term(m, "cm_pulmonary", 0.5),      term(m, "meds_immunosuppressants", 0.4),
      };
      s.outcome.terms = default_outcome_terms(m, false);
      s.outcome.treatment_effect = kSteroidLatentEffect;
      s.regimen.rivaroxaban_share = 0.0;
      break;
    case ScenarioName::fxa:
      s.treatment = TreatmentKind::fxa;
      s.n = 2281;
      s.target_prevalence = 318.0 / 2281.0;
      s.true_att = 0.0;
      s.assignment.intercept = kFxaIntercept;
      s.assignment.latent_coef = 1.5;
      s.assignment.terms = {
          term(m, "age", 0.5),
          term(m, "meds_anticoagulants", 3.5),
          term(m, "cm_chf", 0.4),
          hinge_term(m, "v24_o2_sat_mean", 2.0, 0.0),
      };
      s.outcome.terms = default_outcome_terms(m, false);
      s.outcome.latent_coef = 1.75;
      s.regimen.rivaroxaban_share = 0.0;
      break;
    case ScenarioName::custom: throw Error("make_scenario: custom scenarios are built field by field");
  }
  if (n > 0) s.n = n;
  return s;
}

// ---------------------------------------------------------------------------
// Per-patient draws

/// Everything drawn for one patient. `model_values` are the analysis-scale
/// covariates the treatment and outcome models read, before any recording
/// artifact (missingness, outliers).
struct PatientDraw {
  int age = 0;
  int sex = 0;
  std::vector<std::string> categorical;   // one level per CategoricalSpec
  std::vector<int> comorbidities, medications;
  int charlson = 0;
  std::vector<double> lab_true;            // raw units, rounded to 0.01
  std::vector<std::optional<double>> lab_recorded;
  std::vector<std::vector<preprocess::VitalReading>> vital_readings;
  std::vector<preprocess::VitalSummary> vital_summary;
  double severity = 0.0;                   // latent, unobserved
  double recovery = 0.0;                   // latent, unobserved (R)
  double noise = 0.0;
  double treat_uniform = 0.0;
  std::uint64_t event_seed = 0;            // downstream draws (regimens, support days)
};

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Rounds to `step` (a power of ten) so the result prints in its shortest form.
inline double round_to(double x, double step) {
  const double inv = std::round(1.0 / step);
  return std::round(x * inv) / inv;
}

inline PatientDraw draw_patient(const ScenarioSpec& spec, std::uint64_t seed, std::uint64_t index) {
  const auto& m = spec.covariates;
  auto eng = rng::substream(seed, rng::kPatientStreams + index);
  PatientDraw p;
  p.age = static_cast<int>(std::clamp(std::round(rng::normal(eng, m.age_mean, m.age_sd)), 18.0, 99.0));
  const double age_std = (p.age - m.age_mean) / m.age_sd;
  p.sex = rng::bernoulli(eng, m.male_fraction) ? 1 : 0;
  for (const auto& c : m.categoricals) {
    std::discrete_distribution<std::size_t> d(c.probs.begin(), c.probs.end());
    p.categorical.push_back(c.levels[d(eng)]);
  }
  const double a = m.severity_age_loading;
  p.severity = a * age_std + std::sqrt(1.0 - a * a) * rng::normal(eng);
  p.recovery = rng::normal(eng);

  auto draw_binaries = [&](const std::vector<BinarySpec>& specs, std::vector<int>& out, const PatientDraw& sofar) {
    for (std::size_t k = 0; k < specs.size(); ++k) {
      const auto& b = specs[k];
      double parent = 0.0;
      if (!b.parent.empty()) {
        for (std::size_t c = 0; c < m.comorbidities.size() && c < sofar.comorbidities.size(); ++c)
          if (m.comorbidities[c].name == b.parent) parent = sofar.comorbidities[c];
        for (std::size_t c = 0; c < k; ++c)
          if (specs[c].name == b.parent && &specs == &m.medications) parent = out[c];
      }
      double logit = b.base_logit + b.age_slope * age_std + b.severity_slope * p.severity + b.parent_shift * parent;
      out.push_back(rng::bernoulli(eng, sigmoid(logit)) ? 1 : 0);
    }
  };
  draw_binaries(m.comorbidities, p.comorbidities, p);
  draw_binaries(m.medications, p.medications, p);
  p.charlson = p.age >= 80 ? 4 : p.age >= 70 ? 3 : p.age >= 60 ? 2 : p.age >= 50 ? 1 : 0;
  for (std::size_t k = 0; k < m.comorbidities.size(); ++k)
    p.charlson += p.comorbidities[k] * m.comorbidities[k].charlson_points;

  for (const auto& lab : m.labs) {
    double z = lab.log_mean +
               lab.log_sd * (lab.loading * p.severity + std::sqrt(1.0 - lab.loading * lab.loading) * rng::normal(eng));
    double raw = std::max(0.0, round_to(std::expm1(z), 0.01));
    p.lab_true.push_back(raw);
    bool missing = rng::bernoulli(eng, lab.missing_fraction);
    bool outlier = rng::bernoulli(eng, lab.outlier_fraction);
    if (missing)
      p.lab_recorded.emplace_back();
    else
      p.lab_recorded.emplace_back(outlier ? round_to(raw * m.outlier_factor, 0.01) : raw);
  }

  for (const auto& v : m.vitals) {
    double base = v.mean + v.sd * (v.loading * p.severity + std::sqrt(1.0 - v.loading * v.loading) * rng::normal(eng));
    std::vector<preprocess::VitalReading> rs;
    for (int k = 0; k < m.readings; ++k) {
      double h = round_to(m.reading_interval_hours * k + rng::uniform(eng, 0.0, 1.5), 0.1);
      double val = base + rng::normal(eng, 0.0, v.reading_sd);
      if (v.max_value) val = std::min(val, *v.max_value);
      rs.push_back({h, round_to(val, 0.1)});
    }
    auto series = preprocess::VitalsSeries::make("", v.name, rs);
    p.vital_summary.push_back(preprocess::summarize_vitals(series, 24.0));
    p.vital_readings.push_back(std::move(series.readings));
  }
  p.noise = rng::normal(eng);
  p.treat_uniform = rng::uniform(eng);
  p.event_seed = eng();
  return p;
}

/// Resolves LinearTerms against a PatientDraw.
class TermEvaluator {
 public:
  explicit TermEvaluator(const ScenarioSpec& spec) : spec_(spec) {}

  double value(const PatientDraw& p, std::string_view name) const {
    const auto& m = spec_.covariates;
    if (name == "age") return p.age;
    if (name == "sex") return p.sex;
    if (name == "charlson") return p.charlson;
    for (std::size_t k = 0; k < m.comorbidities.size(); ++k)
      if (m.comorbidities[k].name == name) return p.comorbidities[k];
    for (std::size_t k = 0; k < m.medications.size(); ++k)
      if (m.medications[k].name == name) return p.medications[k];
    for (std::size_t k = 0; k < m.labs.size(); ++k)
      if (name == spec_.lab_prefix + m.labs[k].name) return std::log1p(p.lab_true[k]);
    for (std::size_t k = 0; k < m.vitals.size(); ++k) {
      std::string base = "v24_" + m.vitals[k].name + "_";
      if (!name.starts_with(base)) continue;
      auto stat = name.substr(base.size());
      const auto& s = p.vital_summary[k];
      const auto& cell = stat == "mean" ? s.mean : stat == "min" ? s.min : s.max;
      if (!cell) throw Error("synth: vital summary missing for " + std::string(name));
      return *cell;
    }
    for (std::size_t k = 0; k < m.categoricals.size(); ++k) {
      std::string base = m.categoricals[k].name + "_";
      if (name.starts_with(base)) return p.categorical[k] == name.substr(base.size()) ? 1.0 : 0.0;
    }
    throw Error("synth: unknown covariate '" + std::string(name) + "' in model term");
  }

  double linear(const PatientDraw& p, std::span<const LinearTerm> terms) const {
    double s = 0.0;
    for (const auto& t : terms) {
      double z = (value(p, t.covariate) - t.center) / t.scale;
      s += t.coef * (t.hinge ? std::max(0.0, z) : z);
    }
    return s;
  }

  std::optional<double> true_ddimer(const PatientDraw& p) const {
    const auto& labs = spec_.covariates.labs;
    for (std::size_t k = 0; k < labs.size(); ++k)
      if (labs[k].name == "d_dimer") return p.lab_true[k];
    return std::nullopt;
  }

 private:
  const ScenarioSpec& spec_;
};

struct PotentialOutcomes {
  double latent0 = 0.0;  // latent outcome without treatment
  int y0 = 0;
  int y1 = 0;
  bool treated = false;
  double propensity = 0.0;
};

inline int osfd_from_latent(double latent) {
  return static_cast<int>(std::clamp(std::floor(latent), -1.0, static_cast<double>(cohort::kOutcomeDays)));
}

inline double assignment_probability(const ScenarioSpec& spec, const TermEvaluator& ev, const PatientDraw& p) {
  if (spec.treatment == TreatmentKind::aggressive_ac) {
    auto dd = ev.true_ddimer(p);
    if (dd && *dd >= spec.ddimer_cutoff) return spec.assignment.ddimer_high_probability;
  }
  return sigmoid(spec.assignment.intercept + ev.linear(p, spec.assignment.terms) +
                 spec.assignment.latent_coef * p.recovery);
}

inline PotentialOutcomes potential_outcomes(const ScenarioSpec& spec, const TermEvaluator& ev, const PatientDraw& p) {
  PotentialOutcomes po;
  po.propensity = assignment_probability(spec, ev, p);
  po.treated = p.treat_uniform < po.propensity;
  const auto& o = spec.outcome;
  po.latent0 = o.intercept + ev.linear(p, o.terms) + o.latent_coef * p.recovery + o.noise_sd * p.noise;
  po.y0 = osfd_from_latent(po.latent0);
  po.y1 = osfd_from_latent(po.latent0 + o.treatment_effect);
  return po;
}

// ---------------------------------------------------------------------------
// Cohort generation

struct GeneratorTruth {
  int n = 0;
  int n_treated = 0;                       // by the assignment model
  int complete_cases_without_keep_list = 0;  // no missing among labs with missing_fraction <= 0.2
  int complete_cases_with_ddimer = 0;      // ... and D-dimer recorded
  int ddimer_high = 0;                     // true D-dimer >= cutoff
  int ddimer_high_treated = 0;
  double sample_att = 0.0;                 // mean y1 - y0 over treated patients
};

struct SyntheticCohort {
  io::InputData data;
  GeneratorTruth truth;
  std::vector<int> treated;        // per patient, aligned with data.patients rows
  std::vector<double> recovery;    // latent R per patient
};

inline std::string patient_id(std::uint64_t index) { return fmt::format("P{:06d}", index + 1); }

namespace detail {

inline void add_series(std::vector<cohort::MedAdminEvent>& out, const std::string& id, cohort::Drug drug,
                       double dose, cohort::Route route, double start, double every, double end) {
  for (double t = start; t <= end; t += every) out.push_back({id, drug, dose, route, round_to(t, 0.1)});
}

enum class AcLevel { none, prophylactic, therapeutic };

inline void add_ac_regimen(std::vector<cohort::MedAdminEvent>& out, const std::string& id, AcLevel level, double start,
                           double end, const RegimenModel& reg, rng::Engine& eng) {
  using cohort::Drug;
  using cohort::Route;
  if (level == AcLevel::none || start > end) return;
  double u = rng::uniform(eng);
  if (level == AcLevel::prophylactic) {
    if (u < 0.55)
      add_series(out, id, Drug::heparin, 5000, Route::subcutaneous, start, 8, end);
    else if (u < 0.70)
      add_series(out, id, Drug::heparin, 5000, Route::subcutaneous, start, 12, end);
    else
      add_series(out, id, Drug::enoxaparin, 40, Route::subcutaneous, start, 24, end);
    return;
  }
  double riva = reg.rivaroxaban_share, high = reg.high_sc_heparin_share;
  if (u < riva) {
    add_series(out, id, Drug::rivaroxaban, 20, Route::oral, start, 24, end);
  } else if (u < riva + high) {
    add_series(out, id, Drug::heparin, 7500, Route::subcutaneous, start, 8, end);
  } else if (u < riva + high + 0.05) {
    add_series(out, id, Drug::warfarin, 5, Route::oral, start, 24, end);
  } else if (u < riva + high + 0.09) {
    add_series(out, id, Drug::dabigatran, 150, Route::oral, start, 12, end);
  } else if (u < riva + high + 0.29) {
    add_series(out, id, Drug::enoxaparin, 80, Route::subcutaneous, start, 12, end);
  } else {
    add_series(out, id, Drug::heparin, 6000, Route::intravenous, start, 6, end);
  }
}

}  // namespace detail

/// Realises one cohort in the raw input formats. Deterministic in (spec, seed).
inline SyntheticCohort generate_cohort(const ScenarioSpec& spec, std::uint64_t seed) {
  using cohort::Drug;
  using cohort::Route;
  if (spec.n < 100) throw Error(fmt::format("generate_cohort: n = {} but at least 100 patients are required", spec.n));
  if (!(spec.target_prevalence > 0.0 && spec.target_prevalence < 1.0))
    throw Error(fmt::format("generate_cohort: infeasible prevalence target {}", spec.target_prevalence));
  const auto& m = spec.covariates;
  const auto& reg = spec.regimen;
  TermEvaluator ev(spec);

  SyntheticCohort out;
  auto& d = out.data;
  d.patients.header = {"patient_id", "age", "sex"};
  for (const auto& c : m.categoricals) d.patients.header.push_back(c.name);
  for (const auto& b : m.comorbidities) d.patients.header.push_back(b.name);
  d.patients.header.push_back("charlson");
  for (const auto& b : m.medications) d.patients.header.push_back(b.name);
  for (const auto& l : m.labs) d.patients.header.push_back(spec.lab_prefix + l.name);

  out.truth.n = spec.n;
  double att_sum = 0.0;
  for (int i = 0; i < spec.n; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const std::string id = patient_id(idx);
    PatientDraw p = draw_patient(spec, seed, idx);
    PotentialOutcomes po = potential_outcomes(spec, ev, p);
    const int y = po.treated ? po.y1 : po.y0;
    auto eng = rng::Engine(p.event_seed);

    // patients.csv
    std::vector<std::string> row = {id, std::to_string(p.age), std::to_string(p.sex)};
    for (const auto& c : p.categorical) row.push_back(c);
    for (int v : p.comorbidities) row.push_back(std::to_string(v));
    row.push_back(std::to_string(p.charlson));
    for (int v : p.medications) row.push_back(std::to_string(v));
    bool cc = true, cc_dd = true;
    for (std::size_t k = 0; k < m.labs.size(); ++k) {
      row.push_back(csv::format_optional(p.lab_recorded[k]));
      if (!p.lab_recorded[k]) {
        if (m.labs[k].name == "d_dimer")
          cc_dd = false;
        else if (m.labs[k].missing_fraction <= 0.2)
          cc = false;
      }
    }
    d.patients.rows.push_back(std::move(row));
    out.truth.complete_cases_without_keep_list += cc ? 1 : 0;
    out.truth.complete_cases_with_ddimer += (cc && cc_dd) ? 1 : 0;

    // vitals.csv
    for (std::size_t k = 0; k < m.vitals.size(); ++k)
      d.vitals.push_back(preprocess::VitalsSeries{id, m.vitals[k].name, p.vital_readings[k]});

    // Organ support calendar.
    cohort::OrganSupportRecord rec{id, {}, y < 0, cohort::kOutcomeDays + static_cast<int>(rng::uniform(eng, 0, 41))};
    int support_days = 0;
    if (y < 0) {
      int start = static_cast<int>(rng::uniform(eng, 0, 6));
      int death_day = start + static_cast<int>(rng::uniform(eng, 0, 16));
      for (int day = start; day <= death_day; ++day) rec.support_days.insert(day);
      support_days = death_day - start + 1;
    } else {
      support_days = cohort::kOutcomeDays - y;
      int start = static_cast<int>(rng::uniform(eng, 0, y + 1));
      int end = start + support_days;
      if (support_days > 0 && end == cohort::kOutcomeDays) end += static_cast<int>(rng::uniform(eng, 0, 6));
      for (int day = start; day < end; ++day) rec.support_days.insert(day);
    }
    d.support.push_back(rec);
    double los_hours = 24.0 * (4.0 + support_days + rng::uniform(eng, 0, 4));

    // Anticoagulation.
    bool has_ac = rng::bernoulli(eng, reg.ac_fraction);
    double t0 = round_to(std::exp(rng::normal(eng, std::log(reg.first_dose_median_hours), reg.first_dose_log_sd)), 0.1);
    auto dd = ev.true_ddimer(p);
    bool ac_treated = false;
    if (spec.treatment == TreatmentKind::aggressive_ac) {
      ac_treated = po.treated;
    } else {
      double pr = (dd && *dd >= spec.ddimer_cutoff) ? 0.985 : reg.background_therapeutic;
      ac_treated = rng::bernoulli(eng, pr);
    }
    bool switches = rng::bernoulli(eng, reg.switch_fraction);
    double t_switch = round_to(t0 + rng::uniform(eng, 12, 110), 0.1);
    double ac_end = std::min(los_hours, 14.0 * 24.0);
    if (has_ac) {
      using detail::AcLevel;
      AcLevel first = ac_treated ? AcLevel::therapeutic : AcLevel::prophylactic;
      AcLevel second = ac_treated ? AcLevel::prophylactic : AcLevel::therapeutic;
      double first_end = switches ? std::min(ac_end, t_switch - 0.1) : ac_end;
      detail::add_ac_regimen(d.events, id, first, t0, first_end, reg, eng);
      if (switches) detail::add_ac_regimen(d.events, id, second, t_switch, std::max(ac_end, t_switch), reg, eng);
    }

    // Studied treatments other than AC.
    if (spec.treatment == TreatmentKind::steroid) {
      double u = rng::uniform(eng);
      Drug drug = u < 0.8 ? Drug::dexamethasone : u < 0.9 ? Drug::hydrocortisone : Drug::prednisone;
      double dose = drug == Drug::dexamethasone ? 6 : drug == Drug::hydrocortisone ? 50 : 40;
      double every = drug == Drug::hydrocortisone ? 6 : 24;
      if (po.treated) {
        double start = round_to(rng::uniform(eng, 0.5, 72.0), 0.1);
        detail::add_series(d.events, id, drug, dose, Route::oral, start, every, start + 9 * 24);
      } else if (rng::bernoulli(eng, reg.late_steroid_fraction)) {
        double start = round_to(rng::uniform(eng, 73.0, 300.0), 0.1);
        detail::add_series(d.events, id, drug, dose, Route::oral, start, every, start + 5 * 24);
      }
    } else if (spec.treatment == TreatmentKind::fxa && po.treated) {
      std::size_t home_ac = 0;
      for (std::size_t k = 0; k < m.medications.size(); ++k)
        if (m.medications[k].name == "meds_anticoagulants") home_ac = static_cast<std::size_t>(p.medications[k]);
      if (home_ac && rng::bernoulli(eng, reg.fxa_home_continuation)) {
        detail::add_series(d.events, id, Drug::rivaroxaban, 20, Route::oral, t0, 24, ac_end);
      } else {
        double start = round_to(std::max(1.0, los_hours - rng::uniform(eng, 24, 72)), 0.1);
        if (rng::bernoulli(eng, 0.7))
          detail::add_series(d.events, id, Drug::apixaban, 5, Route::oral, start, 12, los_hours);
        else
          detail::add_series(d.events, id, Drug::rivaroxaban, 20, Route::oral, start, 24, los_hours);
      }
    }

    out.treated.push_back(po.treated ? 1 : 0);
    out.recovery.push_back(p.recovery);
    if (po.treated) {
      ++out.truth.n_treated;
      att_sum += po.y1 - po.y0;
    }
    if (dd && *dd >= spec.ddimer_cutoff) {
      ++out.truth.ddimer_high;
      out.truth.ddimer_high_treated += ac_treated && has_ac ? 1 : 0;
    }
  }
  out.truth.sample_att = out.truth.n_treated ? att_sum / out.truth.n_treated : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Oracle

struct OracleResult {
  double att = 0.0;
  double mc_se = 0.0;
  int n_treated = 0;
};

/// Ground-truth ATT on the reported scale: simulates both potential outcomes
/// of n_mc fresh patients and averages y1 - y0 over those the assignment
/// model treats. Uses only the generative model.
inline OracleResult oracle_att(const ScenarioSpec& spec, int n_mc = 100000, std::uint64_t seed = 1) {
  TermEvaluator ev(spec);
  double s = 0.0, ss = 0.0;
  int nt = 0;
  const std::uint64_t oracle_seed = rng::splitmix64(seed ^ rng::kOracleStreams);
  for (int i = 0; i < n_mc; ++i) {
    PatientDraw p = draw_patient(spec, oracle_seed, static_cast<std::uint64_t>(i));
    PotentialOutcomes po = potential_outcomes(spec, ev, p);
    if (!po.treated) continue;
    double d = po.y1 - po.y0;
    s += d;
    ss += d * d;
    ++nt;
  }
  OracleResult r;
  r.n_treated = nt;
  if (nt == 0) return r;
  r.att = s / nt;
  double var = nt > 1 ? (ss - nt * r.att * r.att) / (nt - 1) : 0.0;
  r.mc_se = std::sqrt(std::max(0.0, var) / nt);
  return r;
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationSample {
  std::vector<double> assignment_linear;  // sum of assignment terms + latent part, no intercept
  std::vector<char> forced;               // D-dimer rule applies
  std::vector<double> latent0;
};

inline CalibrationSample draw_calibration_sample(const ScenarioSpec& spec, int n, std::uint64_t seed) {
  TermEvaluator ev(spec);
  CalibrationSample cs;
  for (int i = 0; i < n; ++i) {
    PatientDraw p = draw_patient(spec, seed, static_cast<std::uint64_t>(i));
    bool forced = false;
    if (spec.treatment == TreatmentKind::aggressive_ac) {
      auto dd = ev.true_ddimer(p);
      forced = dd && *dd >= spec.ddimer_cutoff;
    }
    cs.forced.push_back(forced ? 1 : 0);
    cs.assignment_linear.push_back(ev.linear(p, spec.assignment.terms) + spec.assignment.latent_coef * p.recovery);
    const auto& o = spec.outcome;
    cs.latent0.push_back(o.intercept + ev.linear(p, o.terms) + o.latent_coef * p.recovery + o.noise_sd * p.noise);
  }
  return cs;
}

/// Intercept giving mean assignment probability `target` among patients the
/// D-dimer rule does not force.
inline double calibrate_assignment_intercept(const CalibrationSample& cs, double target) {
  if (!(target > 0.0 && target < 1.0)) throw Error("calibrate: infeasible prevalence target");
  auto prevalence = [&](double a) {
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < cs.assignment_linear.size(); ++i) {
      if (cs.forced[i]) continue;
      s += sigmoid(a + cs.assignment_linear[i]);
      ++n;
    }
    return s / n;
  };
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (prevalence(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Latent effect giving expected clipped-scale ATT `target` (weights are the
/// assignment probabilities, so no treatment draw noise enters).
inline double calibrate_latent_effect(const CalibrationSample& cs, double intercept, double target) {
  auto att = [&](double tau) {
    double s = 0.0, w = 0.0;
    for (std::size_t i = 0; i < cs.latent0.size(); ++i) {
      double p = sigmoid(intercept + cs.assignment_linear[i]);
      s += p * (osfd_from_latent(cs.latent0[i] + tau) - osfd_from_latent(cs.latent0[i]));
      w += p;
    }
    return s / w;
  };
  double lo = 0.0, hi = 22.0;
  for (int it = 0; it < 100; ++it) {
    double mid = 0.5 * (lo + hi);
    (att(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// truth.json

struct DdimerBand {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;
};

inline std::vector<DdimerBand> ddimer_bands(double cutoff = 3000.0) {
  return {{"normal", 0.0, 500.0}, {"mild", 500.0, 1000.0}, {"elevated", 1000.0, cutoff},
          {"extreme", cutoff, std::numeric_limits<double>::infinity()}};
}

inline nlohmann::json truth_json(const ScenarioSpec& spec, std::uint64_t seed, const GeneratorTruth& t,
                                 const std::optional<OracleResult>& oracle) {
  nlohmann::json j;
  j["scenario"] = spec;
  j["seed"] = seed;
  j["generated"] = {{"n", t.n},
                    {"n_treated", t.n_treated},
                    {"complete_cases_without_keep_list", t.complete_cases_without_keep_list},
                    {"complete_cases_with_ddimer", t.complete_cases_with_ddimer},
                    {"ddimer_high", t.ddimer_high},
                    {"ddimer_high_treated", t.ddimer_high_treated},
                    {"sample_att", t.sample_att}};
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : ddimer_bands(spec.ddimer_cutoff)) {
    nlohmann::json bj = {{"label", b.label}, {"lo", b.lo}};
    if (std::isfinite(b.hi))
      bj["hi"] = b.hi;
    else
      bj["hi"] = nullptr;
    bands.push_back(bj);
  }
  j["ddimer_bands"] = bands;
  if (oracle) j["oracle_att"] = {{"att", oracle->att}, {"mc_se", oracle->mc_se}, {"n_treated", oracle->n_treated}};
  return j;
}

}  // namespace cohortfx::synth
