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
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cohortfx/error.hpp"
#include "cohortfx/glm.hpp"

namespace cohortfx::matching {

struct ScoredUnit {
  std::string id;
  double score = 0.0;
};

enum class CaliperUnit { sd, absolute };

inline std::string_view caliper_unit_name(CaliperUnit u) { return u == CaliperUnit::sd ? "sd" : "absolute"; }

inline CaliperUnit parse_caliper_unit(std::string_view s) {
  if (s == "sd") return CaliperUnit::sd;
  if (s == "absolute") return CaliperUnit::absolute;
  throw Error("caliper unit must be 'sd' or 'absolute', got '" + std::string(s) + "'");
}

struct MatchOptions {
  int ratio = 3;
  double caliper = 0.05;
  CaliperUnit unit = CaliperUnit::sd;
  bool replace = true;
};

struct Match {
  std::string treated_id;
  double treated_score = 0.0;
  std::vector<std::string> control_ids;
  std::vector<double> distances;
};

struct DroppedTreated {
  std::string id;
  std::string reason;
};

struct MatchedSet {
  std::vector<Match> matches;                  // in processing order
  std::map<std::string, double> control_weights;
  std::vector<DroppedTreated> dropped_treated;
  double caliper_used = 0.0;                   // absolute, on the score scale
  MatchOptions options;
  std::size_t n_treated_input = 0;

  double matched_fraction() const {
    return n_treated_input == 0 ? 0.0 : static_cast<double>(matches.size()) / static_cast<double>(n_treated_input);
  }
};

inline double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Absolute caliper on the score scale: in sd mode, caliper times the sample
/// SD of all (treated and control) scores.
inline double absolute_caliper(std::span<const ScoredUnit> treated, std::span<const ScoredUnit> controls,
                               const MatchOptions& opt) {
  if (opt.unit == CaliperUnit::absolute) return opt.caliper;
  std::vector<double> pooled;
  pooled.reserve(treated.size() + controls.size());
  for (const auto& u : treated) pooled.push_back(u.score);
  for (const auto& u : controls) pooled.push_back(u.score);
  return opt.caliper * sample_sd(pooled);
}

/// Treated units sorted by descending score, ties by id.
inline std::vector<std::size_t> treated_processing_order(std::span<const ScoredUnit> treated) {
  std::vector<std::size_t> order(treated.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (treated[a].score != treated[b].score) return treated[a].score > treated[b].score;
    return treated[a].id < treated[b].id;
  });
  return order;
}

/// k-nearest-neighbour matching on the score within a caliper. Candidates
/// are ranked by (distance, control id), so results do not depend on input
/// row order.
inline MatchedSet match_nearest_caliper(std::span<const ScoredUnit> treated, std::span<const ScoredUnit> controls,
                                        const MatchOptions& opt = {}) {
  if (controls.empty()) throw Error("match_nearest_caliper: empty control pool");
  if (opt.ratio < 1) throw Error("match_nearest_caliper: ratio must be >= 1");
  if (!(opt.caliper > 0.0)) throw Error("match_nearest_caliper: caliper must be positive");
  auto check = [](const ScoredUnit& u) {
    if (!(u.score > 0.0 && u.score < 1.0))
      throw Error(fmt::format("match_nearest_caliper: score {} of '{}' outside (0,1)", u.score, u.id));
  };
  std::for_each(treated.begin(), treated.end(), check);
  std::for_each(controls.begin(), controls.end(), check);

  MatchedSet out;
  out.options = opt;
  out.n_treated_input = treated.size();
  out.caliper_used = absolute_caliper(treated, controls, opt);
  const double caliper = out.caliper_used;
  const auto k = static_cast<std::size_t>(opt.ratio);

  std::vector<const ScoredUnit*> pool;
  pool.reserve(controls.size());
  for (const auto& c : controls) pool.push_back(&c);
  std::sort(pool.begin(), pool.end(), [](const ScoredUnit* a, const ScoredUnit* b) {
    if (a->score != b->score) return a->score < b->score;
    return a->id < b->id;
  });
  std::vector<char> used(pool.size(), 0);

  struct Cand {
    std::size_t idx;
    double dist;
  };
  constexpr double inf = std::numeric_limits<double>::infinity();

  for (auto ti : treated_processing_order(treated)) {
    const ScoredUnit& t = treated[ti];
    auto pos = static_cast<std::ptrdiff_t>(
        std::lower_bound(pool.begin(), pool.end(), t.score,
                         [](const ScoredUnit* c, double s) { return c->score < s; }) -
        pool.begin());
    std::ptrdiff_t left = pos - 1, right = pos;
    const auto np = static_cast<std::ptrdiff_t>(pool.size());
    std::vector<Cand> got;
    for (;;) {
      while (left >= 0 && used[static_cast<std::size_t>(left)]) --left;
      while (right < np && used[static_cast<std::size_t>(right)]) ++right;
      double dl = left >= 0 ? t.score - pool[static_cast<std::size_t>(left)]->score : inf;
      double dr = right < np ? pool[static_cast<std::size_t>(right)]->score - t.score : inf;
      if (dl > caliper) dl = inf;
      if (dr > caliper) dr = inf;
      double d = std::min(dl, dr);
      if (d == inf) break;
      if (got.size() >= k && d > got[k - 1].dist) break;
      if (dl <= dr) {
        got.push_back({static_cast<std::size_t>(left), dl});
        --left;
      } else {
        got.push_back({static_cast<std::size_t>(right), dr});
        ++right;
      }
    }
    if (got.empty()) {
      out.dropped_treated.push_back({t.id, "no control within caliper"});
      continue;
    }
    std::sort(got.begin(), got.end(), [&](const Cand& a, const Cand& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      return pool[a.idx]->id < pool[b.idx]->id;
    });
    if (got.size() > k) got.resize(k);
    Match m{t.id, t.score, {}, {}};
    const double w = 1.0 / static_cast<double>(got.size());
    for (const auto& c : got) {
      m.control_ids.push_back(pool[c.idx]->id);
      m.distances.push_back(c.dist);
      out.control_weights[pool[c.idx]->id] += w;
      if (!opt.replace) used[c.idx] = 1;
    }
    out.matches.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Balance

struct BalanceRow {
  std::string covariate;
  bool binary = false;
  double treated_sd = 0.0;
  double smd_pre = 0.0;
  std::optional<double> smd_post;
  bool zero_variance = false;  // treated SD is zero; raw mean differences reported
};

/// Standardised mean differences, treated minus control, scaled by the
/// (unweighted) treated-group SD. `weights`, when given, holds the post-match
/// weight of every row: 1 for matched treated, 0 for unmatched treated and the
/// accumulated match weight for controls.
inline std::vector<BalanceRow> smd_balance(const glm::DesignMatrix& x, std::span<const int> treated,
                                           std::span<const double> weights = {}) {
  x.validate();
  if (static_cast<Eigen::Index>(treated.size()) != x.rows()) throw Error("smd_balance: arm size mismatch");
  if (!weights.empty() && weights.size() != treated.size()) throw Error("smd_balance: weight size mismatch");
  std::vector<BalanceRow> out;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    auto col = x.values.col(j);
    bool binary = true;
    double st = 0, nt = 0, sc = 0, nc = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double v = col(i);
      if (v != 0.0 && v != 1.0) binary = false;
      if (treated[static_cast<std::size_t>(i)]) {
        st += v;
        nt += 1;
      } else {
        sc += v;
        nc += 1;
      }
    }
    if (nt == 0 || nc == 0) throw Error("smd_balance: both arms must be non-empty");
    double mt = st / nt, mc = sc / nc;
    double sd = 0.0;
    if (binary) {
      sd = std::sqrt(mt * (1.0 - mt));
    } else if (nt > 1) {
      double ss = 0;
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        if (treated[static_cast<std::size_t>(i)]) ss += (col(i) - mt) * (col(i) - mt);
      sd = std::sqrt(ss / (nt - 1));
    }
    BalanceRow row{x.names[static_cast<std::size_t>(j)], binary, sd, 0.0, std::nullopt, false};
    row.zero_variance = !(sd > 0.0);
    double scale = row.zero_variance ? 1.0 : sd;
    row.smd_pre = (mt - mc) / scale;
    if (!weights.empty()) {
      double wt = 0, wst = 0, wc = 0, wsc = 0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double w = weights[static_cast<std::size_t>(i)];
        if (w < 0) throw Error("smd_balance: negative weight");
        if (treated[static_cast<std::size_t>(i)]) {
          wt += w;
          wst += w * col(i);
        } else {
          wc += w;
          wsc += w * col(i);
        }
      }
      if (wt > 0 && wc > 0) row.smd_post = (wst / wt - wsc / wc) / scale;
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline double max_abs_smd(std::span<const BalanceRow> rows, bool post) {
  double m = 0.0;
  for (const auto& r : rows) {
    double v = post ? r.smd_post.value_or(0.0) : r.smd_pre;
    m = std::max(m, std::abs(v));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Overlap

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges on [0, 1]
  std::vector<std::size_t> treated;
  std::vector<std::size_t> control;
};

inline Histogram overlap_histogram(std::span<const double> ps_treated, std::span<const double> ps_control,
                                   int bins = 30) {
  if (bins < 2) throw Error("overlap_histogram: need at least 2 bins");
  Histogram h;
  const auto nb = static_cast<std::size_t>(bins);
  for (std::size_t b = 0; b <= nb; ++b) h.edges.push_back(static_cast<double>(b) / static_cast<double>(nb));
  h.treated.assign(nb, 0);
  h.control.assign(nb, 0);
  auto bin_of = [&](double p) {
    auto b = static_cast<std::ptrdiff_t>(std::floor(p * static_cast<double>(nb)));
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(nb) - 1));
  };
  for (double p : ps_treated) ++h.treated[bin_of(p)];
  for (double p : ps_control) ++h.control[bin_of(p)];
  return h;
}

}  // namespace cohortfx::matching
