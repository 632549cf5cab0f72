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
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "cohortfx/error.hpp"
#include "cohortfx/glm.hpp"
#include "cohortfx/matching.hpp"
#include "cohortfx/rng.hpp"

namespace cohortfx::estimation {

inline constexpr double kZ975 = 1.959963984540054;

enum class Estimator { unadjusted, regression, matched };

inline std::string_view estimator_name(Estimator e) {
  switch (e) {
    case Estimator::unadjusted: return "unadjusted";
    case Estimator::regression: return "regression";
    case Estimator::matched: return "matched";
  }
  return "?";
}

struct EffectEstimate {
  Estimator estimator = Estimator::unadjusted;
  double point = 0.0;  // OSFD days
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  double p_value = 1.0;  // two-sided, normal approximation
  std::string variance;  // how se was obtained

  bool ci_contains(double v) const { return ci_lo <= v && v <= ci_hi; }
};

inline double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

inline EffectEstimate make_estimate(Estimator e, double point, double se, std::size_t nt, std::size_t nc,
                                    std::string variance) {
  EffectEstimate est{e, point, se, point - kZ975 * se, point + kZ975 * se, nt, nc, 1.0, std::move(variance)};
  if (se > 0.0)
    est.p_value = two_sided_p(point / se);
  else
    est.p_value = point == 0.0 ? 1.0 : 0.0;
  return est;
}

/// Difference in means with the Welch (unpooled) standard error.
inline EffectEstimate unadjusted_diff(std::span<const double> y, std::span<const int> treated) {
  if (y.size() != treated.size()) throw Error("unadjusted_diff: size mismatch");
  double s1 = 0, s0 = 0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (treated[i]) {
      s1 += y[i];
      ++n1;
    } else {
      s0 += y[i];
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw Error("unadjusted_diff: both arms must be non-empty");
  double m1 = s1 / static_cast<double>(n1), m0 = s0 / static_cast<double>(n0);
  double v1 = 0, v0 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (treated[i])
      v1 += (y[i] - m1) * (y[i] - m1);
    else
      v0 += (y[i] - m0) * (y[i] - m0);
  }
  v1 = n1 > 1 ? v1 / static_cast<double>(n1 - 1) : 0.0;
  v0 = n0 > 1 ? v0 / static_cast<double>(n0 - 1) : 0.0;
  double se = std::sqrt(v1 / static_cast<double>(n1) + v0 / static_cast<double>(n0));
  return make_estimate(Estimator::unadjusted, m1 - m0, se, n1, n0, "welch");
}

inline constexpr std::string_view kTreatmentColumn = "treatment";

/// Coefficient on the treatment indicator in an OLS of y on
/// [treatment, covariates] with HC1 errors.
inline EffectEstimate regression_adjusted_att(const glm::DesignMatrix& covariates, std::span<const int> treated,
                                              std::span<const double> y) {
  if (static_cast<Eigen::Index>(treated.size()) != covariates.rows() || treated.size() != y.size())
    throw Error("regression_adjusted_att: size mismatch");
  glm::DesignMatrix x;
  x.values.resize(covariates.rows(), covariates.cols() + 1);
  for (std::size_t i = 0; i < treated.size(); ++i) x.values(static_cast<Eigen::Index>(i), 0) = treated[i] ? 1.0 : 0.0;
  x.values.rightCols(covariates.cols()) = covariates.values;
  x.names.push_back(std::string(kTreatmentColumn));
  for (const auto& n : covariates.names) {
    if (n == kTreatmentColumn) throw Error("regression_adjusted_att: covariate named 'treatment'");
    x.names.push_back(n);
  }
  auto fit = glm::fit_ols_robust(x, y);
  std::size_t n1 = static_cast<std::size_t>(std::count_if(treated.begin(), treated.end(), [](int t) { return t != 0; }));
  return make_estimate(Estimator::regression, fit.coefficients(1), fit.standard_errors(1), n1, treated.size() - n1,
                       "hc1");
}

enum class MatchedVariance { analytic, bootstrap };

struct MatchedAttOptions {
  MatchedVariance variance = MatchedVariance::analytic;
  int bootstrap_reps = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 0;  // 0: hardware concurrency
};

using OutcomeLookup = std::unordered_map<std::string, double>;

namespace detail {

inline double lookup(const OutcomeLookup& y, const std::string& id) {
  auto it = y.find(id);
  if (it == y.end()) throw Error("matched_att: no outcome for '" + id + "'");
  return it->second;
}

}  // namespace detail

/// ATT over matched treated units: mean of y_treated minus the mean of its
/// matched controls. The analytic variance follows the matching-with-
/// replacement form
///   V = [ sum_i (d_i - att)^2 + s2 * sum_j (K_j^2 - K'_j) ] / N1^2
/// with d_i the unit-level difference, K_j the accumulated weight of control j,
/// K'_j the sum of its squared per-match weights and s2 the pooled
/// within-match-set control variance.
inline EffectEstimate matched_att(const matching::MatchedSet& matched, const OutcomeLookup& outcomes,
                                  const MatchedAttOptions& opt = {}) {
  if (matched.matches.empty()) throw Error("matched_att: matched set is empty");
  const auto n1 = static_cast<double>(matched.matches.size());
  std::vector<double> diffs;
  diffs.reserve(matched.matches.size());
  double within_ss = 0.0, within_df = 0.0;
  std::unordered_map<std::string, std::pair<double, double>> k_weights;  // id -> (K, K')
  for (const auto& m : matched.matches) {
    double cm = 0.0;
    for (const auto& c : m.control_ids) cm += detail::lookup(outcomes, c);
    const auto mi = static_cast<double>(m.control_ids.size());
    cm /= mi;
    diffs.push_back(detail::lookup(outcomes, m.treated_id) - cm);
    if (m.control_ids.size() > 1) {
      for (const auto& c : m.control_ids) {
        double d = detail::lookup(outcomes, c) - cm;
        within_ss += d * d;
      }
      within_df += mi - 1.0;
    }
    for (const auto& c : m.control_ids) {
      auto& kw = k_weights[c];
      kw.first += 1.0 / mi;
      kw.second += 1.0 / (mi * mi);
    }
  }
  double att = 0.0;
  for (double d : diffs) att += d;
  att /= n1;

  double se = 0.0;
  std::string method;
  if (opt.variance == MatchedVariance::analytic) {
    double s2 = 0.0;
    if (within_df > 0) {
      s2 = within_ss / within_df;
    } else {
      std::vector<double> ys;
      for (const auto& [id, w] : k_weights) ys.push_back(detail::lookup(outcomes, id));
      double sd = matching::sample_sd(ys);
      s2 = sd * sd;
    }
    double t1 = 0.0;
    for (double d : diffs) t1 += (d - att) * (d - att);
    double t2 = 0.0;
    for (const auto& [id, w] : k_weights) t2 += w.first * w.first - w.second;
    se = std::sqrt((t1 + s2 * t2) / (n1 * n1));
    method = "analytic-matching-with-replacement";
  } else {
    if (opt.bootstrap_reps < 2) throw Error("matched_att: need at least 2 bootstrap replicates");
    const auto reps = static_cast<std::size_t>(opt.bootstrap_reps);
    std::vector<double> rep_att(reps, 0.0);
    auto run = [&](std::size_t begin, std::size_t end) {
      for (std::size_t r = begin; r < end; ++r) {
        auto eng = rng::substream(opt.seed, rng::kBootstrapStreams + r);
        std::uniform_int_distribution<std::size_t> pick(0, diffs.size() - 1);
        double s = 0.0;
        for (std::size_t i = 0; i < diffs.size(); ++i) s += diffs[pick(eng)];
        rep_att[r] = s / n1;
      }
    };
    unsigned nt = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
    nt = static_cast<unsigned>(std::min<std::size_t>(nt, reps));
    if (nt <= 1) {
      run(0, reps);
    } else {
      std::vector<std::jthread> workers;
      std::size_t chunk = (reps + nt - 1) / nt;
      for (std::size_t b = 0; b < reps; b += chunk) workers.emplace_back(run, b, std::min(reps, b + chunk));
    }
    se = matching::sample_sd(rep_att);
    method = fmt::format("cluster-bootstrap-{}", reps);
  }
  return make_estimate(Estimator::matched, att, se, matched.matches.size(), matched.control_weights.size(),
                       method);
}

/// Pearson correlation between the 0/1 treatment and the outcome.
inline double treatment_outcome_correlation(std::span<const double> y, std::span<const int> treated) {
  const auto n = static_cast<double>(y.size());
  double my = 0, mt = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    my += y[i];
    mt += treated[i] ? 1.0 : 0.0;
  }
  my /= n;
  mt /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double t = (treated[i] ? 1.0 : 0.0) - mt, d = y[i] - my;
    sxy += t * d;
    sxx += t * t;
    syy += d * d;
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct ImportantCovariates {
  std::vector<std::string> outcome_model;
  std::vector<std::string> treatment_model;
  std::set<std::string> selected;  // union
  double outcome_lambda = 0.0;
  double treatment_lambda = 0.0;
};

/// Union of the predictors kept by a cross-validated L1 linear model of the
/// outcome and a cross-validated L1 logistic model of treatment.
inline ImportantCovariates select_important_covariates(const glm::DesignMatrix& x, std::span<const double> y,
                                                       std::span<const int> treated, std::uint64_t seed,
                                                       int folds = 10, glm::CvRule rule = glm::CvRule::min) {
  if (x.cols() < 2) throw Error("select_important_covariates: need at least 2 covariates");
  std::vector<double> t(treated.begin(), treated.end());
  for (auto& v : t) v = v != 0.0 ? 1.0 : 0.0;
  glm::CvOptions opt;
  opt.folds = folds;
  opt.rule = rule;
  opt.seed = seed;
  auto out_cv = glm::cv_select_lambda(x, y, glm::Family::linear, opt);
  auto trt_cv = glm::cv_select_lambda(x, t, glm::Family::logistic, opt);
  ImportantCovariates res;
  res.outcome_model = out_cv.active_set;
  res.treatment_model = trt_cv.active_set;
  res.outcome_lambda = out_cv.lambda;
  res.treatment_lambda = trt_cv.lambda;
  res.selected.insert(res.outcome_model.begin(), res.outcome_model.end());
  res.selected.insert(res.treatment_model.begin(), res.treatment_model.end());
  return res;
}

}  // namespace cohortfx::estimation
