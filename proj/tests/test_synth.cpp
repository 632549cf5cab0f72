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


#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cohortfx/cohortfx.hpp"

namespace {

using namespace cohortfx;
using namespace cohortfx::synth;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cohortfx_synth_" + name);
  fs::remove_all(p);
  return p;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(Synth, SameSeedWritesIdenticalFiles) {
  auto spec = make_scenario(ScenarioName::steroid, 400);
  auto a = scratch("det_a"), b = scratch("det_b");
  io::write_inputs(a, generate_cohort(spec, 9).data);
  io::write_inputs(b, generate_cohort(spec, 9).data);
  for (auto f : {io::kPatientsFile, io::kVitalsFile, io::kEventsFile, io::kSupportFile, io::kOutcomesFile})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  auto c = scratch("det_c");
  io::write_inputs(c, generate_cohort(spec, 10).data);
  EXPECT_NE(slurp(a / io::kPatientsFile), slurp(c / io::kPatientsFile));
}

TEST(Synth, PatientsDependOnlyOnSeedAndIndex) {
  auto small = generate_cohort(make_scenario(ScenarioName::ac, 300), 5);
  auto large = generate_cohort(make_scenario(ScenarioName::ac, 600), 5);
  ASSERT_EQ(small.data.patients.header, large.data.patients.header);
  for (std::size_t i = 0; i < small.data.patients.rows.size(); ++i)
    ASSERT_EQ(small.data.patients.rows[i], large.data.patients.rows[i]) << "row " << i;
  EXPECT_EQ(std::vector<int>(large.treated.begin(), large.treated.begin() + 300), small.treated);
}

TEST(Synth, RejectsTinyCohortsAndBadPrevalence) {
  EXPECT_THROW(generate_cohort(make_scenario(ScenarioName::steroid, 50), 1), Error);
  auto spec = make_scenario(ScenarioName::steroid, 200);
  spec.target_prevalence = 1.0;
  EXPECT_THROW(generate_cohort(spec, 1), Error);
  EXPECT_THROW(parse_scenario("bogus"), Error);
}

TEST(Synth, SteroidTreatedCountNearTarget) {
  auto spec = make_scenario(ScenarioName::steroid);
  const double expect = spec.target_prevalence * spec.n;
  const double sd = std::sqrt(expect * (1 - spec.target_prevalence));
  for (std::uint64_t seed : {1, 2, 3}) {
    auto c = generate_cohort(spec, seed);
    EXPECT_NEAR(c.truth.n_treated, expect, 3 * sd) << "seed " << seed;
  }
}

TEST(Synth, HighDdimerAlmostAlwaysAggressive) {
  auto spec = make_scenario(ScenarioName::ac);
  auto c = generate_cohort(spec, 3);
  ASSERT_GT(c.truth.ddimer_high, 50);
  std::size_t high = 0, high_treated = 0;
  // Assignment-model intent, before regimen noise.
  TermEvaluator ev(spec);
  for (int i = 0; i < spec.n; ++i) {
    auto p = draw_patient(spec, 3, static_cast<std::uint64_t>(i));
    auto dd = ev.true_ddimer(p);
    if (!dd || *dd < spec.ddimer_cutoff) continue;
    ++high;
    high_treated += c.treated[static_cast<std::size_t>(i)];
  }
  EXPECT_EQ(static_cast<int>(high), c.truth.ddimer_high);
  EXPECT_GT(static_cast<double>(high_treated) / high, 0.95);
}

TEST(Oracle, NullScenariosAreExactlyZero) {
  for (auto name : {ScenarioName::ac, ScenarioName::fxa}) {
    auto r = oracle_att(make_scenario(name), 20000, 4);
    EXPECT_EQ(r.att, 0.0);
    EXPECT_GT(r.n_treated, 0);
  }
}

TEST(Oracle, SteroidMatchesNominalEffect) {
  auto spec = make_scenario(ScenarioName::steroid);
  auto r = oracle_att(spec, 400000, 17);
  // MC error plus the residual of calibrating on a different sample.
  EXPECT_NEAR(r.att, spec.true_att, 4 * r.mc_se + 0.02);
  EXPECT_NEAR(static_cast<double>(r.n_treated) / 400000, spec.target_prevalence, 0.005);
}

TEST(Oracle, SteroidEffectBarelyDependsOnAssignment) {
  // The effect is constant on the latent scale; clipping at the ends of the
  // outcome range makes the reported-scale ATT depend weakly on who is treated.
  auto spec = make_scenario(ScenarioName::steroid);
  auto swapped = spec;
  auto& t = swapped.assignment.terms;
  std::reverse(t.begin(), t.end());
  std::vector<double> coefs;
  for (auto& x : spec.assignment.terms) coefs.push_back(x.coef);
  for (std::size_t k = 0; k < t.size(); ++k) t[k].coef = coefs[k];
  auto a = oracle_att(spec, 200000, 8), b = oracle_att(swapped, 200000, 8);
  EXPECT_NEAR(a.att, b.att, 0.15);
}

TEST(Synth, RecoveryIsIndependentOfRecordedCovariates) {
  auto spec = make_scenario(ScenarioName::fxa, 10000);
  auto c = generate_cohort(spec, 21);
  const auto& t = c.data.patients;
  int checked = 0;
  for (std::size_t col = 1; col < t.header.size(); ++col) {
    std::vector<double> v, r;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto& cell = t.rows[i][col];
      if (cell.empty() || !csv::is_number(cell)) continue;
      auto x = csv::parse_number(cell);
      v.push_back(*x);
      r.push_back(c.recovery[i]);
    }
    if (v.size() < 1000) continue;
    ++checked;
    EXPECT_LT(std::abs(pearson(v, r)), 0.05) << t.header[col];
  }
  EXPECT_GT(checked, 20);
}

TEST(Synth, TruthJsonCarriesGeneratorFacts) {
  auto spec = make_scenario(ScenarioName::steroid, 300);
  auto c = generate_cohort(spec, 2);
  auto j = truth_json(spec, 2, c.truth, oracle_att(spec, 5000, 2));
  EXPECT_EQ(j.at("seed").get<int>(), 2);
  EXPECT_EQ(j.at("generated").at("n_treated").get<int>(), c.truth.n_treated);
  EXPECT_TRUE(j.contains("oracle_att"));
  auto back = j.at("scenario").get<ScenarioSpec>();
  EXPECT_EQ(nlohmann::json(back), j.at("scenario"));
}

TEST(Synth, HingeTermsRoundTripAndApply) {
  auto m = default_covariate_model();
  auto h = hinge_term(m, "v24_o2_sat_mean", 2.0, 0.0);
  EXPECT_TRUE(h.hinge);
  auto back = nlohmann::json(h).get<LinearTerm>();
  EXPECT_TRUE(back.hinge);
  EXPECT_EQ(back.center, h.center);
  auto plain = nlohmann::json::parse(R"({"covariate":"age","coef":1.0,"center":0.0,"scale":1.0})").get<LinearTerm>();
  EXPECT_FALSE(plain.hinge);

  auto spec = make_scenario(ScenarioName::fxa, 200);
  TermEvaluator ev(spec);
  auto p = draw_patient(spec, 1, 0);
  double z = (ev.value(p, h.covariate) - h.center) / h.scale;
  std::vector<LinearTerm> terms{h};
  EXPECT_DOUBLE_EQ(ev.linear(p, terms), 2.0 * std::max(0.0, z));
}

TEST(Synth, CalibrationHitsTarget) {
  auto spec = make_scenario(ScenarioName::steroid);
  auto cs = draw_calibration_sample(spec, 20000, 3);
  double a = calibrate_assignment_intercept(cs, 0.1);
  double mean = 0;
  for (double l : cs.assignment_linear) mean += sigmoid(a + l) / cs.assignment_linear.size();
  EXPECT_NEAR(mean, 0.1, 1e-9);
  EXPECT_THROW(calibrate_assignment_intercept(cs, 0.0), Error);
}

}  // namespace
