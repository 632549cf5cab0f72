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

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "cohortfx/cohortfx.hpp"

namespace {

using namespace cohortfx;
namespace fs = std::filesystem;

struct Overrides {
  std::optional<std::string> analysis, caliper_unit, variance, data_dir, out_dir;
  std::optional<double> window_hours, caliper, ddimer_cutoff, ridge;
  std::optional<int> ratio, bootstrap_reps;
  std::optional<std::uint64_t> seed;
  bool no_select = false;
  std::string config;

  void add_to(CLI::App* app, bool analysis_flags) {
    app->add_option("--config", config, "key = value configuration file");
    app->add_option("--seed", seed, "RNG seed");
    app->add_option("--out-dir", out_dir, "output directory");
    if (!analysis_flags) return;
    app->add_option("--analysis", analysis, "ac, steroid or fxa");
    app->add_option("--data-dir", data_dir, "directory holding the input CSVs");
    app->add_option("--window-hours", window_hours, "treatment window (24, 48, 72 or 96)");
    app->add_option("--caliper", caliper, "matching caliper");
    app->add_option("--caliper-unit", caliper_unit, "sd or absolute");
    app->add_option("--ratio", ratio, "controls per treated patient");
    app->add_option("--ddimer-cutoff", ddimer_cutoff, "AC exclusion cutoff (ng/mL)");
    app->add_option("--ridge", ridge, "ridge penalty for the propensity model");
    app->add_option("--variance", variance, "matched-ATT variance: analytic or bootstrap");
    app->add_option("--bootstrap-reps", bootstrap_reps, "bootstrap replicates");
    app->add_flag("--no-select", no_select, "skip the Lasso important-covariate selection");
  }

  pipeline::PipelineConfig resolve() const {
    pipeline::PipelineConfig cfg;
    if (!config.empty()) cfg = pipeline::load_config(config);
    auto set = [&](const char* key, const auto& v) {
      if (!v) return;
      try {
        if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, std::string>)
          pipeline::apply_setting(cfg, key, *v);
        else
          pipeline::apply_setting(cfg, key, fmt::format("{}", *v));
      } catch (const Error& e) {
        throw StageError(Stage::config, e.what());
      }
    };
    set("analysis", analysis);
    set("data_dir", data_dir);
    set("out_dir", out_dir);
    set("window_hours", window_hours);
    set("caliper", caliper);
    set("caliper_unit", caliper_unit);
    set("ratio", ratio);
    set("ddimer_cutoff", ddimer_cutoff);
    set("ridge", ridge);
    set("variance", variance);
    set("bootstrap_reps", bootstrap_reps);
    set("seed", seed);
    if (no_select) cfg.select_covariates = false;
    cfg.validate();
    return cfg;
  }
};

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("COHORTFX_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

int cmd_simulate(const std::string& scenario, std::optional<int> n, std::uint64_t seed, const fs::path& out,
                 int oracle_mc) {
  synth::ScenarioSpec spec;
  try {
    spec = synth::make_scenario(synth::parse_scenario(scenario), n.value_or(0));
  } catch (const Error& e) {
    throw StageError(Stage::config, e.what());
  }
  synth::SyntheticCohort cohort;
  try {
    cohort = synth::generate_cohort(spec, seed);
  } catch (const Error& e) {
    throw StageError(Stage::config, e.what());
  }
  std::optional<synth::OracleResult> oracle;
  if (oracle_mc > 0) oracle = synth::oracle_att(spec, oracle_mc, seed);
  try {
    io::write_inputs(out, cohort.data);
    pipeline::write_json(out / "truth.json", synth::truth_json(spec, seed, cohort.truth, oracle));
  } catch (const std::exception& e) {
    throw StageError(Stage::io, e.what());
  }
  spdlog::info("wrote {} patients ({} treated) to {}", cohort.truth.n, cohort.truth.n_treated, out.string());
  if (oracle) spdlog::info("oracle ATT {:.4f} (MC se {:.4f})", oracle->att, oracle->mc_se);
  return 0;
}

int cmd_analyze(const pipeline::PipelineConfig& cfg) {
  spdlog::info("analysis {} on {} -> {}", pipeline::analysis_name(cfg.analysis), cfg.data_dir.string(),
               cfg.out_dir.string());
  auto rep = pipeline::run_pipeline(cfg);
  for (const auto& w : rep.result.warnings) spdlog::warn("{}", w);
  for (const auto& e : rep.result.effects)
    spdlog::info("{:<10} {:+.3f} [{:+.3f}, {:+.3f}]", estimation::estimator_name(e.estimator), e.point, e.ci_lo,
                 e.ci_hi);
  spdlog::info("matched {} of {} treated", rep.result.matched.matches.size(), rep.result.n_treated());
  return 0;
}

int cmd_sweep(const pipeline::PipelineConfig& cfg, const std::vector<double>& windows,
              const std::vector<double>& calipers) {
  io::InputData data;
  try {
    data = io::read_inputs(cfg.data_dir);
  } catch (const std::exception& e) {
    throw StageError(Stage::io, e.what());
  }
  auto rows = pipeline::run_sweep(data, cfg, windows, calipers);
  try {
    fs::create_directories(cfg.out_dir);
    pipeline::write_sweep(cfg.out_dir / "sweep.csv", cfg, rows);
  } catch (const std::exception& e) {
    throw StageError(Stage::report, e.what());
  }
  for (const auto& r : rows)
    spdlog::info("window {:>3}h caliper {:<5} matched {:+.3f} [{:+.3f}, {:+.3f}]", r.window_hours, r.caliper,
                 r.matched.point, r.matched.ci_lo, r.matched.ci_hi);
  spdlog::info("confidence intervals {} overlap", pipeline::cis_mutually_overlap(rows) ? "all" : "do not all");
  return 0;
}

int cmd_calibrate(int draws, std::uint64_t seed) {
  for (auto name : {synth::ScenarioName::ac, synth::ScenarioName::steroid, synth::ScenarioName::fxa}) {
    auto spec = synth::make_scenario(name);
    auto sample = synth::draw_calibration_sample(spec, draws, seed);
    double a = synth::calibrate_assignment_intercept(sample, spec.target_prevalence);
    std::cout << fmt::format("{:<8} intercept {:.4f}", nlohmann::json(name).get<std::string>(), a);
    if (spec.true_att != 0.0)
      std::cout << fmt::format("  latent effect {:.4f}", synth::calibrate_latent_effect(sample, a, spec.true_att));
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"cohortfx: propensity-matched treatment effects on hospital cohorts"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "write a synthetic cohort and its truth.json");
  std::string scenario = "steroid";
  std::optional<int> n;
  std::uint64_t sim_seed = 1;
  std::string sim_out = "data";
  int oracle_mc = 100000;
  sim->add_option("--scenario", scenario, "ac, steroid or fxa")->capture_default_str();
  sim->add_option("--n", n, "number of patients (scenario default when omitted)");
  sim->add_option("--seed", sim_seed, "RNG seed")->capture_default_str();
  sim->add_option("--out-dir", sim_out, "output directory")->capture_default_str();
  sim->add_option("--oracle-mc", oracle_mc, "Monte-Carlo draws for the oracle ATT (0 skips)")->capture_default_str();

  auto* ana = app.add_subcommand("analyze", "run the analysis pipeline on a data directory");
  Overrides ana_o;
  ana_o.add_to(ana, true);

  auto* rep = app.add_subcommand("report", "forest.csv and summary.md from analysis directories");
  std::vector<std::string> runs;
  std::string rep_out = "report";
  rep->add_option("runs", runs, "analysis output directories")->required();
  rep->add_option("--out-dir", rep_out, "output directory")->capture_default_str();

  auto* swp = app.add_subcommand("sweep", "matched ATT across treatment windows and calipers");
  Overrides swp_o;
  swp_o.add_to(swp, true);
  std::vector<double> windows{24, 48, 72, 96};
  std::vector<double> calipers;
  swp->add_option("--windows", windows, "window hours to sweep")->delimiter(',');
  swp->add_option("--calipers", calipers, "calipers to sweep (default: the configured one)")->delimiter(',');

  auto* cal = app.add_subcommand("calibrate", "print assignment intercepts and effects for the built-in scenarios");
  int draws = 2000000;
  std::uint64_t cal_seed = 20260101;
  cal->add_option("--draws", draws, "patients per scenario")->capture_default_str();
  cal->add_option("--seed", cal_seed, "RNG seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : static_cast<int>(Stage::config);
  }

  try {
    if (*sim) return cmd_simulate(scenario, n, sim_seed, sim_out, oracle_mc);
    if (*ana) return cmd_analyze(ana_o.resolve());
    if (*rep) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      auto rows = pipeline::emit_report(dirs, rep_out);
      spdlog::info("wrote {} forest rows to {}", rows.size(), rep_out);
      return 0;
    }
    if (*swp) {
      auto cfg = swp_o.resolve();
      if (calipers.empty()) calipers.push_back(cfg.caliper);
      cfg.allow_nonstandard_window = true;
      return cmd_sweep(cfg, windows, calipers);
    }
    if (*cal) return cmd_calibrate(draws, cal_seed);
  } catch (const StageError& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
