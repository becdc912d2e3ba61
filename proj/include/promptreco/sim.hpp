// Copyright 2026 The promptreco Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end simulation: generate runs at a remote site, import them, drive
// PC and ER across farms through the control system, check every audit and
// write a JSON report.
//
// Report schema (top level):
//   ok, violations[]            every failed audit, named
//   plan                        the plan as run
//   deterministic               identical for the same plan and seed when no
//                               random worker kills are scheduled:
//     runs[]                    {run, phase, calibration{...}, er{farm, version,
//                               calib_version, calib_validity, counters,
//                               killer_events}, residual{mean, mean_abs,
//                               subsystems[]}, qa{...}}
//     mean_abs_residual         over all committed events of all done runs
//   runtime                     timing dependent:
//     wall_s, workers_spawned, worker_crashes, redelivered
//     farms[]                   {id, kind, total_events, gaps[], rate[]}
//     import, export, alerts[]
//   audits                      per-audit {ok, detail}

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/conditions.hpp"
#include "promptreco/core.hpp"
#include "promptreco/xtc.hpp"

namespace promptreco {

struct SimulationPlan {
  std::uint32_t runs = 3;
  std::uint32_t first_run = 1001;
  std::uint32_t events_per_run = 2000;
  double run_duration_s = 600;  // data-taking time covered by each run
  DetectorTruth truth;
  std::uint32_t pc_farms = 1;
  std::uint32_t pc_workers = 4;
  std::uint32_t er_farms = 2;
  std::uint32_t er_workers = 4;
  LookupMode mode = LookupMode::two_pass;
  std::uint64_t seed = 1;
  bool in_process = false;  // ports instead of loopback sockets
  double pc_deadtime_s = 0.4;
  double er_deadtime_s = 0.2;
  double pc_sample_cost_ms = 1.0;  // farm time per sampled event, split over the PC workers
  double metrics_period_s = 0.05;

  // Fault schedule.
  double worker_kill_probability = 0;       // chance each worker incarnation is killed mid-run
  std::set<std::uint32_t> poison_events;    // event ids that crash any worker, in every run
  double import_corruption_probability = 0; // per transfer attempt

  std::uint32_t qa_sample = 500;  // accepted events per run fed to QA
  std::map<std::string, std::string> config;  // PipelineConfig overrides
  std::optional<int> api_port;                // serve the control API while running

  void validate() const;
  PipelineConfig pipeline_config() const;
  nlohmann::json to_json() const;
  static SimulationPlan from_json(const nlohmann::json& j);
  static SimulationPlan load(const std::filesystem::path& path);
};

struct SimulationReport {
  nlohmann::json json;
  bool ok() const { return json.at("ok").get<bool>(); }
  std::vector<std::string> violations() const { return json.at("violations").get<std::vector<std::string>>(); }
};

/// Runs the plan in `work_dir` (created; existing content is removed).
SimulationReport simulate(const SimulationPlan& plan, const std::filesystem::path& work_dir);

struct PlotSummary {
  std::vector<std::filesystem::path> files;
  /// Per farm: integral of the plotted rate against the report's event total.
  std::map<std::string, std::pair<double, std::uint64_t>> areas;
  std::map<std::string, std::vector<std::pair<double, double>>> gaps;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Writes rate_<farm>.csv/.svg and residuals.csv/.svg into `out_dir`.
PlotSummary plot(const nlohmann::json& report, const std::filesystem::path& out_dir);

/// Idle stretches between activity: maximal runs of zero-rate samples that
/// have nonzero samples on both sides, at least `min_s` long.
std::vector<std::pair<double, double>> rate_gaps(const nlohmann::json& rate_series, double min_s);

}  // namespace promptreco
