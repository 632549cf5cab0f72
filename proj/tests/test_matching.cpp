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

#include <algorithm>
#include <random>

#include "cohortfx/cohortfx.hpp"
#include "oracles.hpp"

namespace {

using namespace cohortfx;
using namespace cohortfx::matching;

std::vector<ScoredUnit> units(std::initializer_list<std::pair<const char*, double>> l) {
  std::vector<ScoredUnit> out;
  for (const auto& [id, s] : l) out.push_back({id, s});
  return out;
}

MatchOptions abs_opt(int k, double cal, bool replace = true) {
  MatchOptions o;
  o.ratio = k;
  o.caliper = cal;
  o.unit = CaliperUnit::absolute;
  o.replace = replace;
  return o;
}

TEST(Match, NearestWithinCaliper) {
  auto t = units({{"t1", 0.50}});
  auto c = units({{"c1", 0.48}, {"c2", 0.53}, {"c3", 0.60}, {"c4", 0.505}});
  auto m = match_nearest_caliper(t, c, abs_opt(3, 0.05));
  ASSERT_EQ(m.matches.size(), 1u);
  EXPECT_EQ(m.matches[0].control_ids, (std::vector<std::string>{"c4", "c1", "c2"}));
  EXPECT_DOUBLE_EQ(m.control_weights.at("c4"), 1.0 / 3.0);
}

TEST(Match, NoControlInCaliperDropsTreated) {
  auto t = units({{"t1", 0.9}, {"t2", 0.2}});
  auto c = units({{"c1", 0.21}});
  auto m = match_nearest_caliper(t, c, abs_opt(1, 0.05));
  ASSERT_EQ(m.matches.size(), 1u);
  EXPECT_EQ(m.matches[0].treated_id, "t2");
  ASSERT_EQ(m.dropped_treated.size(), 1u);
  EXPECT_EQ(m.dropped_treated[0].id, "t1");
  EXPECT_DOUBLE_EQ(m.matched_fraction(), 0.5);
}

TEST(Match, TiesBeyondKKeepSmallestIds) {
  auto t = units({{"t", 0.5}});
  auto c = units({{"c9", 0.55}, {"c2", 0.45}, {"c5", 0.55}, {"c1", 0.7}});
  auto m = match_nearest_caliper(t, c, abs_opt(2, 0.1));
  EXPECT_EQ(m.matches[0].control_ids, (std::vector<std::string>{"c2", "c5"}));
}

TEST(Match, WithoutReplacementUsesEachControlOnce) {
  auto t = units({{"t1", 0.6}, {"t2", 0.59}});
  auto c = units({{"c1", 0.595}});
  auto with = match_nearest_caliper(t, c, abs_opt(1, 0.05, true));
  auto without = match_nearest_caliper(t, c, abs_opt(1, 0.05, false));
  EXPECT_EQ(with.matches.size(), 2u);
  EXPECT_DOUBLE_EQ(with.control_weights.at("c1"), 2.0);
  ASSERT_EQ(without.matches.size(), 1u);
  EXPECT_EQ(without.matches[0].treated_id, "t1");  // highest score goes first
}

TEST(Match, SdCaliperUsesPooledSampleSd) {
  auto t = units({{"t1", 0.2}, {"t2", 0.4}});
  auto c = units({{"c1", 0.6}, {"c2", 0.8}});
  MatchOptions o;
  o.caliper = 0.5;
  auto m = match_nearest_caliper(t, c, o);
  std::vector<double> pooled{0.2, 0.4, 0.6, 0.8};
  EXPECT_NEAR(m.caliper_used, 0.5 * oracle::sd(pooled), 1e-15);
}

TEST(Match, InputValidation) {
  auto t = units({{"t", 0.5}});
  EXPECT_THROW(match_nearest_caliper(t, {}, {}), Error);
  auto bad = units({{"c", 1.0}});
  EXPECT_THROW(match_nearest_caliper(t, bad, {}), Error);
  auto c = units({{"c", 0.5}});
  MatchOptions o;
  o.ratio = 0;
  EXPECT_THROW(match_nearest_caliper(t, c, o), Error);
  o.ratio = 1;
  o.caliper = 0;
  EXPECT_THROW(match_nearest_caliper(t, c, o), Error);
}

TEST(Match, InvariantToInputOrder) {
  std::mt19937_64 eng(1);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<ScoredUnit> t, c;
  for (int i = 0; i < 40; ++i) t.push_back({"t" + std::to_string(i), std::round(u(eng) * 50) / 50});
  for (int i = 0; i < 120; ++i) c.push_back({"c" + std::to_string(i), std::round(u(eng) * 50) / 50});
  auto a = match_nearest_caliper(t, c);
  std::shuffle(t.begin(), t.end(), eng);
  std::shuffle(c.begin(), c.end(), eng);
  auto b = match_nearest_caliper(t, c);
  ASSERT_EQ(a.matches.size(), b.matches.size());
  for (std::size_t i = 0; i < a.matches.size(); ++i) {
    EXPECT_EQ(a.matches[i].treated_id, b.matches[i].treated_id);
    EXPECT_EQ(a.matches[i].control_ids, b.matches[i].control_ids);
  }
}

TEST(Match, AgreesWithBruteForce) {
  std::mt19937_64 eng(2);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int inst = 0; inst < 60; ++inst) {
    std::vector<ScoredUnit> t, c;
    std::vector<oracle::Unit> ot, oc;
    for (int i = 0; i < 15; ++i) {
      double s = (1 + std::round(u(eng) * 28)) / 30;
      t.push_back({"t" + std::to_string(i), s});
      ot.push_back({t.back().id, s});
    }
    for (int i = 0; i < 40; ++i) {
      double s = (1 + std::round(u(eng) * 28)) / 30;
      c.push_back({"c" + std::to_string(i), s});
      oc.push_back({c.back().id, s});
    }
    for (bool replace : {true, false}) {
      MatchOptions o;
      o.ratio = 3;
      o.caliper = 0.2;
      o.replace = replace;
      auto got = match_nearest_caliper(t, c, o);
      auto want = oracle::brute_force_match(ot, oc, 3, 0.2, true, replace);
      ASSERT_EQ(got.matches.size(), want.size());
      for (std::size_t m = 0; m < want.size(); ++m) {
        EXPECT_EQ(got.matches[m].treated_id, want[m].treated);
        EXPECT_EQ(got.matches[m].control_ids, want[m].controls);
      }
    }
  }
}

TEST(Balance, SmdUsesTreatedSd) {
  glm::DesignMatrix x{Eigen::MatrixXd(6, 2), {"cont", "bin"}};
  x.values << 1, 1,  //
      3, 0,          //
      5, 1,          // treated rows 0-2
      0, 0,          //
      1, 0,          //
      2, 1;
  std::vector<int> tr{1, 1, 1, 0, 0, 0};
  auto rows = smd_balance(x, tr);
  EXPECT_NEAR(rows[0].smd_pre, (3.0 - 1.0) / 2.0, 1e-15);  // treated sd = 2
  EXPECT_TRUE(rows[1].binary);
  double pt = 2.0 / 3.0;
  EXPECT_NEAR(rows[1].smd_pre, (pt - 1.0 / 3.0) / std::sqrt(pt * (1 - pt)), 1e-15);
  EXPECT_FALSE(rows[0].smd_post.has_value());
}

TEST(Balance, WeightsGivePostMatchSmd) {
  glm::DesignMatrix x{Eigen::MatrixXd(4, 1), {"v"}};
  x.values << 2, 4, 2, 10;
  std::vector<int> tr{1, 1, 0, 0};
  std::vector<double> w{1, 1, 2, 0};
  auto rows = smd_balance(x, tr, w);
  ASSERT_TRUE(rows[0].smd_post.has_value());
  EXPECT_NEAR(*rows[0].smd_post, (3.0 - 2.0) / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(max_abs_smd(rows, true), std::abs(*rows[0].smd_post), 0);
}

TEST(Balance, ZeroVarianceTreatedFlagged) {
  glm::DesignMatrix x{Eigen::MatrixXd(4, 1), {"v"}};
  x.values << 1, 1, 0, 1;
  std::vector<int> tr{1, 1, 0, 0};
  auto rows = smd_balance(x, tr);
  EXPECT_TRUE(rows[0].zero_variance);
  EXPECT_DOUBLE_EQ(rows[0].smd_pre, 0.5);
}

TEST(Histogram, CountsEveryScore) {
  std::vector<double> t{0.0, 0.5, 0.999, 1.0}, c{0.1, 0.1};
  auto h = overlap_histogram(t, c, 10);
  EXPECT_EQ(h.edges.size(), 11u);
  std::size_t st = 0, sc = 0;
  for (auto v : h.treated) st += v;
  for (auto v : h.control) sc += v;
  EXPECT_EQ(st, 4u);
  EXPECT_EQ(sc, 2u);
  EXPECT_EQ(h.treated[9], 2u);
  EXPECT_EQ(h.control[1], 2u);
}

TEST(Match, EquidistantControlsAllKept) {
  auto t = units({{"t", 0.5}});
  auto c = units({{"a", 0.5}, {"b", 0.5}, {"c", 0.5}});
  auto m = match_nearest_caliper(t, c, abs_opt(3, 0.05));
  ASSERT_EQ(m.matches.size(), 1u);
  EXPECT_EQ(m.matches[0].control_ids.size(), 3u);
  for (double d : m.matches[0].distances) EXPECT_EQ(d, 0.0);
}

TEST(Match, WeightsAndDistancesRespectContract) {
  std::mt19937_64 eng(12);
  std::uniform_real_distribution<double> u;
  std::vector<ScoredUnit> t, c;
  for (int i = 0; i < 60; ++i) t.push_back({"t" + std::to_string(i), u(eng) * 0.6 + 0.4});
  for (int i = 0; i < 150; ++i) c.push_back({"c" + std::to_string(i), u(eng) * 0.7});
  MatchOptions o;
  auto m = match_nearest_caliper(t, c, o);
  double total = 0;
  for (const auto& [id, w] : m.control_weights) total += w;
  EXPECT_NEAR(total, static_cast<double>(m.matches.size()), 1e-12);
  for (const auto& mt : m.matches)
    for (double d : mt.distances) EXPECT_LE(d, m.caliper_used);
  EXPECT_EQ(m.matches.size() + m.dropped_treated.size(), t.size());
}

TEST(Balance, IdenticalGroupsAndUnitShift) {
  glm::DesignMatrix same{Eigen::MatrixXd(4, 1), {"v"}};
  same.values << 1, 3, 1, 3;
  std::vector<int> tr{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(smd_balance(same, tr)[0].smd_pre, 0.0);

  glm::DesignMatrix shift{Eigen::MatrixXd(5, 1), {"v"}};
  shift.values << 0, 1, 2, -1, 1;  // treated mean 1, sd 1; control mean 0
  std::vector<int> tr5{1, 1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(smd_balance(shift, tr5)[0].smd_pre, 1.0);
}

TEST(Histogram, IdenticalScoresShareOneBin) {
  std::vector<double> t(5, 0.5), c(3, 0.5);
  auto h = overlap_histogram(t, c, 20);
  int nonzero = 0;
  for (std::size_t b = 0; b < h.treated.size(); ++b) nonzero += (h.treated[b] + h.control[b]) > 0;
  EXPECT_EQ(nonzero, 1);
}

}  // namespace
