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

#include "promptreco/sim.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <list>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "promptreco/bookkeeping.hpp"
#include "promptreco/control.hpp"
#include "promptreco/dispatch.hpp"
#include "promptreco/evstore.hpp"
#include "promptreco/services.hpp"
#include "promptreco/transfer.hpp"
#include "promptreco/worker.hpp"

namespace fs = std::filesystem;

namespace promptreco {

// -- plan ----------------------------------------------------------------------

void SimulationPlan::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("simulation plan: " + m); };
  if (runs == 0) bad("runs must be positive");
  if (first_run < 2) bad("first_run must be at least 2 (the run before it seeds the conditions)");
  RunId last(first_run + runs - 1);  // range check
  (void)last;
  if (events_per_run == 0) bad("events_per_run must be positive");
  if (!(run_duration_s > 0)) bad("run_duration_s must be positive");
  truth.validate();
  if (pc_farms == 0 || pc_workers == 0) bad("need at least one PC farm with one worker");
  if (er_farms == 0 || er_workers == 0) bad("need at least one ER farm with one worker");
  if (pc_deadtime_s < 0 || er_deadtime_s < 0 || pc_sample_cost_ms < 0) bad("deadtimes and costs must be non-negative");
  if (!(metrics_period_s > 0)) bad("metrics_period_s must be positive");
  if (worker_kill_probability < 0 || worker_kill_probability > 1) bad("worker_kill_probability must be in [0, 1]");
  if (import_corruption_probability < 0 || import_corruption_probability >= 1)
    bad("import_corruption_probability must be in [0, 1)");
  for (auto e : poison_events)
    if (e >= events_per_run) bad(fmt::format("poison event {} is beyond the run length", e));
  if (api_port && (*api_port < 0 || *api_port > 65535)) bad("api_port out of range");
  pipeline_config();
}

PipelineConfig SimulationPlan::pipeline_config() const {
  PipelineConfig cfg;
  for (const auto& [k, v] : config) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

nlohmann::json SimulationPlan::to_json() const {
  nlohmann::json j = {
      {"runs", runs},
      {"first_run", first_run},
      {"events_per_run", events_per_run},
      {"run_duration_s", run_duration_s},
      {"truth",
       {{"pedestal", truth.pedestal},
        {"gain", truth.gain},
        {"pedestal_drift", truth.pedestal_drift},
        {"gain_drift", truth.gain_drift},
        {"reference_run", truth.reference_run},
        {"noise_sigma", truth.noise_sigma},
        {"seed", truth.seed}}},
      {"pc_farms", pc_farms},
      {"pc_workers", pc_workers},
      {"er_farms", er_farms},
      {"er_workers", er_workers},
      {"mode", mode == LookupMode::two_pass ? "two_pass" : "one_pass"},
      {"seed", seed},
      {"in_process", in_process},
      {"pc_deadtime_s", pc_deadtime_s},
      {"er_deadtime_s", er_deadtime_s},
      {"pc_sample_cost_ms", pc_sample_cost_ms},
      {"metrics_period_s", metrics_period_s},
      {"worker_kill_probability", worker_kill_probability},
      {"poison_events", poison_events},
      {"import_corruption_probability", import_corruption_probability},
      {"qa_sample", qa_sample},
      {"config", config},
  };
  j["api_port"] = api_port ? nlohmann::json(*api_port) : nlohmann::json();
  return j;
}

SimulationPlan SimulationPlan::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("simulation plan must be a JSON object");
  static const std::set<std::string> known = {
      "runs",          "first_run",     "events_per_run",         "run_duration_s",   "truth",
      "pc_farms",      "pc_workers",    "er_farms",               "er_workers",       "mode",
      "seed",          "in_process",    "pc_deadtime_s",          "er_deadtime_s",    "pc_sample_cost_ms",
      "metrics_period_s", "worker_kill_probability", "poison_events", "import_corruption_probability",
      "qa_sample",     "config",        "api_port"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(fmt::format("simulation plan: unknown key '{}'", k));
  SimulationPlan p;
  try {
    p.runs = j.value("runs", p.runs);
    p.first_run = j.value("first_run", p.first_run);
    p.events_per_run = j.value("events_per_run", p.events_per_run);
    p.run_duration_s = j.value("run_duration_s", p.run_duration_s);
    if (j.contains("truth")) {
      const auto& t = j["truth"];
      p.truth.pedestal = t.value("pedestal", p.truth.pedestal);
      p.truth.gain = t.value("gain", p.truth.gain);
      p.truth.pedestal_drift = t.value("pedestal_drift", p.truth.pedestal_drift);
      p.truth.gain_drift = t.value("gain_drift", p.truth.gain_drift);
      p.truth.reference_run = t.value("reference_run", p.truth.reference_run);
      p.truth.noise_sigma = t.value("noise_sigma", p.truth.noise_sigma);
      p.truth.seed = t.value("seed", p.truth.seed);
    }
    p.pc_farms = j.value("pc_farms", p.pc_farms);
    p.pc_workers = j.value("pc_workers", p.pc_workers);
    p.er_farms = j.value("er_farms", p.er_farms);
    p.er_workers = j.value("er_workers", p.er_workers);
    const std::string mode = j.value("mode", std::string("two_pass"));
    if (mode == "two_pass") p.mode = LookupMode::two_pass;
    else if (mode == "one_pass") p.mode = LookupMode::one_pass;
    else throw ConfigError(fmt::format("simulation plan: mode must be two_pass or one_pass, not '{}'", mode));
    p.seed = j.value("seed", p.seed);
    p.in_process = j.value("in_process", p.in_process);
    p.pc_deadtime_s = j.value("pc_deadtime_s", p.pc_deadtime_s);
    p.er_deadtime_s = j.value("er_deadtime_s", p.er_deadtime_s);
    p.pc_sample_cost_ms = j.value("pc_sample_cost_ms", p.pc_sample_cost_ms);
    p.metrics_period_s = j.value("metrics_period_s", p.metrics_period_s);
    p.worker_kill_probability = j.value("worker_kill_probability", p.worker_kill_probability);
    p.poison_events = j.value("poison_events", p.poison_events);
    p.import_corruption_probability = j.value("import_corruption_probability", p.import_corruption_probability);
    p.qa_sample = j.value("qa_sample", p.qa_sample);
    if (j.contains("config"))
      for (const auto& [k, v] : j["config"].items()) p.config[k] = v.is_string() ? v.get<std::string>() : v.dump();
    if (j.contains("api_port") && !j["api_port"].is_null()) p.api_port = j["api_port"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("simulation plan: {}", e.what()));
  }
  p.validate();
  return p;
}

SimulationPlan SimulationPlan::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read simulation plan {}", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

// -- simulation ----------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

std::string run_file(RunId run) { return fmt::format("run{}.xtc", run.str()); }

nlohmann::json calibration_json(const RollingCalibration& c) {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& k : c.constants)
    cs.push_back({{"pedestal", k.pedestal}, {"gain", k.gain}, {"pedestal_se", k.pedestal_se}, {"gain_se", k.gain_se}});
  return {{"version", c.version},           {"validity_start", c.validity_start.value()},
          {"source_first", c.source_first.value()}, {"source_last", c.source_last.value()},
          {"samples", c.samples},           {"constants", cs}};
}

nlohmann::json series_json(const std::vector<RatePoint>& pts) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : pts) out.push_back({{"t0", p.t0}, {"t1", p.t1}, {"events", p.events}, {"rate", p.rate()}});
  return out;
}

CalibrationStats sample_run(const fs::path& xtc, double interval_s, std::atomic<std::uint64_t>* counter,
                            const std::function<void()>& per_sample) {
  XtcReader reader(xtc);
  PcSampler sampler(interval_s);
  CalibrationStats stats;
  while (auto e = reader.next()) {
    if (counter) counter->fetch_add(1, std::memory_order_relaxed);
    if (!sampler.accept(*e)) continue;
    stats = accumulate(std::move(stats), *e);
    if (per_sample) per_sample();
  }
  return stats;
}

// Kills each worker incarnation with the plan's probability at one fault
// point, on its k-th pass through that point.
std::function<bool(FaultPoint, std::uint32_t)> kill_schedule(double p, std::uint64_t seed, RunId run,
                                                             std::uint32_t worker) {
  const auto h = hash64(seed, run.value(), worker);
  if (p <= 0 || unit_interval(h) >= p) return {};
  const auto point = static_cast<FaultPoint>(hash64(h, 1) % 5);
  const bool per_event = point == FaultPoint::after_assign || point == FaultPoint::after_processed;
  const auto k = 1 + hash64(h, 2) % (per_event ? 400 : 3);
  auto seen = std::make_shared<std::uint64_t>(0);
  return [=](FaultPoint at, std::uint32_t) { return at == point && ++*seen == k; };
}

struct ErFarm {
  std::string id;
  std::unique_ptr<EventStore> store;
  std::unique_ptr<StoreServer> server;
};

struct RunOutcome {
  RunId run;
  std::string farm;
  std::uint32_t version = 0;
  std::string calib_version;
  RunId calib_validity;
  RunSummary summary;
  std::vector<double> residual_mean, residual_mean_abs;
  double sum_abs = 0;
  std::uint64_t n_residual = 0;
  std::optional<QaReport> qa;
};

class Simulation {
 public:
  Simulation(const SimulationPlan& plan, fs::path work)
      : plan_(plan), cfg_(plan.pipeline_config()), work_(std::move(work)), t0_(Clock::now()),
        alerts_([this] { return now(); }), metrics_([this] { return now(); }, &alerts_, 3) {}

  SimulationReport run();

 private:
  double now() const { return std::chrono::duration<double>(Clock::now() - t0_).count(); }
  void violation(const std::string& audit, const std::string& detail) {
    std::lock_guard g(mu_);
    violations_.push_back(fmt::format("{}: {}", audit, detail));
    audit_detail_[audit].push_back(detail);
  }
  void generate();
  void import_files();
  void seed_conditions();
  void pc_job(PcAssignment a);
  void er_job(ErAssignment a);
  void audit_er(const ErAssignment& a, const LoggingManager& lm, EventStore& store,
                const std::vector<std::string>& collections, RunOutcome& out);
  void coordinate();
  void final_audits();
  void export_stores();
  SimulationReport report();

  const SimulationPlan& plan_;
  PipelineConfig cfg_;
  fs::path work_;
  Clock::time_point t0_;

  AlertBook alerts_;
  MetricsCollector metrics_;
  std::unique_ptr<ConditionsStore> conditions_;
  std::unique_ptr<Bookkeeping> bookkeeping_;
  std::unique_ptr<Orchestrator> orch_;
  std::unique_ptr<ConditionsServer> conditions_server_;
  std::map<std::string, ErFarm> er_;
  std::map<std::string, std::unique_ptr<std::atomic<std::uint64_t>>> counters_;
  std::vector<FarmSpec> specs_;
  std::set<std::string> er_ids_;

  std::mutex mu_;
  std::vector<std::string> violations_;
  std::map<std::string, std::vector<std::string>> audit_detail_;
  std::map<std::uint32_t, CalibrationStats> pc_stats_;
  std::map<std::uint32_t, RollingCalibration> calibrations_;
  std::map<std::uint32_t, RunOutcome> outcomes_;
  std::atomic<std::uint32_t> next_worker_{1};
  std::atomic<std::uint64_t> crashes_{0};
  std::atomic<std::uint64_t> redelivered_{0};
  std::atomic<int> active_{0};
  nlohmann::json import_json_, export_json_;
  mutable std::mutex import_mu_;
  double wall_s_ = 0;
};

void Simulation::generate() {
  fs::create_directories(work_ / "remote");
  fs::create_directories(work_ / "seed");
  const auto seed_run = RunId(plan_.first_run - 1);
  generate_run(work_ / "seed" / run_file(seed_run), seed_run, plan_.events_per_run, plan_.run_duration_s, plan_.truth,
               cfg_.event_payload_bytes);
  for (std::uint32_t i = 0; i < plan_.runs; ++i) {
    const RunId run(plan_.first_run + i);
    generate_run(work_ / "remote" / run_file(run), run, plan_.events_per_run, plan_.run_duration_s, plan_.truth,
                 cfg_.event_payload_bytes);
  }
}

void Simulation::import_files() {
  std::vector<std::string> files;
  for (std::uint32_t i = 0; i < plan_.runs; ++i) files.push_back(run_file(RunId(plan_.first_run + i)));
  ImportOptions opts;
  opts.source_dir = work_ / "remote";
  opts.staging_dir = work_ / "remote-staging";
  opts.dest_dir = work_ / "xtc";
  opts.archive_dir = work_ / "archive";
  opts.seed = plan_.seed;
  opts.retry_interval_s = 30;
  opts.max_retries = 5;
  opts.event_log = work_ / "import.jsonl";
  const double p = plan_.import_corruption_probability;
  const auto seed = plan_.seed;
  opts.corrupt = [p, seed](const std::string& file, std::uint32_t attempt) {
    return p > 0 && unit_interval(hash64(seed, crc32(as_bytes(file)), attempt)) < p;
  };
  opts.on_tick = [this](const ImportState& s) {
    std::lock_guard g(import_mu_);
    import_json_ = s.to_json();
  };
  auto rep = run_import(files, opts);
  std::size_t verified = 0;
  for (const auto& job : rep.final_state.jobs) {
    if (job.state != ImportStage::done) {
      violation("import", fmt::format("{} ended {}: {}", job.file, to_string(job.state), job.last_error));
      continue;
    }
    if (!verify_import(job)) violation("import", fmt::format("{} digest mismatch", job.file));
    else if (to_hex(file_digest(opts.dest_dir / job.file)) != to_hex(file_digest(opts.source_dir / job.file)))
      violation("import", fmt::format("{} differs from the remote copy", job.file));
    else ++verified;
  }
  std::lock_guard g(import_mu_);
  import_json_ = {{"state", rep.final_state.to_json()},
                  {"verified", verified},
                  {"corruptions_injected", rep.corruptions_injected},
                  {"corruptions_caught", rep.corruptions_caught},
                  {"max_staging", rep.max_staging},
                  {"max_transferring", rep.max_transferring},
                  {"max_archiving", rep.max_archiving}};
}

// The run before the first one is calibrated offline so that one-pass
// processing of the first run has constants to read.
void Simulation::seed_conditions() {
  const auto seed_run = RunId(plan_.first_run - 1);
  auto stats = sample_run(work_ / "seed" / run_file(seed_run), cfg_.sample_interval_s, nullptr, {});
  const std::array<RunStats, 1> window = {RunStats{seed_run, stats}};
  auto cal = roll(window, cfg_.calib_min_samples);
  if (!cal) cal = RollingCalibration::identity(plan_.truth.subsystems(), seed_run);
  {
    std::lock_guard g(mu_);
    pc_stats_[seed_run.value()] = stats;
    calibrations_[seed_run.value()] = *cal;
  }
  orch_->seed_calibration(*cal);
}

void Simulation::pc_job(PcAssignment a) {
  auto& counter = *counters_.at(a.farm);
  const double per_sample_ms = plan_.pc_sample_cost_ms / plan_.pc_workers;
  double debt_ms = 0;
  auto cost = [&] {
    debt_ms += per_sample_ms;
    if (debt_ms >= 1.0) {
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(debt_ms));
      debt_ms = 0;
    }
  };
  try {
    auto stats = sample_run(a.xtc, cfg_.sample_interval_s, &counter, cost);
    std::vector<RunStats> window;
    {
      std::lock_guard g(mu_);
      pc_stats_[a.run.value()] = stats;
      for (const auto& [r, s] : pc_stats_)
        if (r <= a.run.value()) window.push_back({RunId(r), s});
    }
    auto cal = roll(window, cfg_.calib_min_samples);
    if (!cal) {
      orch_->on_pc_failed(a.run, "not enough calibration samples");
      return;
    }
    {
      std::lock_guard g(mu_);
      calibrations_[a.run.value()] = *cal;
    }
    orch_->on_pc_complete(a.run, *cal);
  } catch (const std::exception& e) {
    spdlog::warn("PC of run {} failed: {}", a.run.str(), e.what());
    orch_->on_pc_failed(a.run, e.what());
  }
}

void Simulation::er_job(ErAssignment a) {
  auto& farm = er_.at(a.farm);
  auto& counter = *counters_.at(a.farm);
  RunOutcome out;
  out.run = a.run;
  out.farm = a.farm;
  out.version = a.version;
  out.calib_version = a.calib_version;
  out.calib_validity = a.calib_validity;
  AttemptCounters counters;
  try {
    fs::create_directories(work_ / "decisions");
    LoggingManager lm(a.xtc, cfg_.killer_threshold,
                      work_ / "decisions" / fmt::format("run{}-v{}.jsonl", a.run.str(), a.version));
    std::unique_ptr<LmServer> lm_server;
    if (!plan_.in_process) lm_server = std::make_unique<LmServer>(lm, Endpoint::parse("127.0.0.1:0"));
    const auto collections = collection_names(StreamRegistry::standard(), orch_->options().release, true, a.version, a.run);
    farm.store->declare_collections(collections);
    const auto federation = er_federation(a.farm);

    std::atomic<bool> abort{false};
    std::mutex abort_mu;
    std::string abort_reason;
    auto body = [&] {
      while (!lm.finished() && !abort) {
        const std::uint32_t id = next_worker_++;
        WorkerContext ctx;
        ctx.worker_id = id;
        ctx.config = cfg_;
        ctx.mode = plan_.mode;
        ctx.collections = collections;
        ctx.seed = hash64(plan_.seed, id);
        ctx.processed_counter = &counter;
        ctx.store_backoff = std::chrono::milliseconds(5);
        ctx.faults.crash_at = kill_schedule(plan_.worker_kill_probability, plan_.seed, a.run, id);
        ctx.faults.poison = plan_.poison_events;
        WorkerSummary s;
        if (plan_.in_process) {
          LocalLm l(lm, id);
          LocalStore st(*farm.store, id);
          LocalConditions c(*conditions_, federation);
          s = run_worker(ctx, l, st, c);
        } else {
          LmClient l(lm_server->endpoint(), id);
          StoreClient st(farm.server->endpoint(), id);
          ConditionsClient c(conditions_server_->endpoint(), federation);
          s = run_worker(ctx, l, st, c);
        }
        if (s.crashed) ++crashes_;
        std::string reason;
        if (s.error) reason = *s.error;
        else if (s.calib_validity && *s.calib_validity != a.calib_validity)
          reason = fmt::format("worker {} read calibration {} instead of {}", id, s.calib_validity->str(),
                               a.calib_validity.str());
        if (!reason.empty()) {
          std::lock_guard g(abort_mu);
          if (abort_reason.empty()) abort_reason = reason;
          abort = true;
        }
      }
    };
    std::vector<std::thread> workers;
    for (std::uint32_t i = 0; i < plan_.er_workers; ++i) workers.emplace_back(body);
    for (auto& t : workers) t.join();
    if (lm_server) lm_server->stop();

    out.summary = lm.summary();
    counters = {out.summary.read, out.summary.filtered_out, out.summary.committed, out.summary.killer,
                out.summary.redelivered};
    redelivered_ += out.summary.redelivered;
    if (abort) {
      orch_->on_er_failed(a.run, abort_reason, counters);
      violation("er", fmt::format("run {} failed: {}", a.run.str(), abort_reason));
      return;
    }
    audit_er(a, lm, *farm.store, collections, out);
  } catch (const std::exception& e) {
    violation("er", fmt::format("run {} failed: {}", a.run.str(), e.what()));
    try {
      orch_->on_er_failed(a.run, e.what(), counters);
    } catch (const std::exception& e2) {
      violation("control", e2.what());
    }
    return;
  }
  orch_->on_er_complete(a.run, counters);
  if (out.qa) orch_->record_qa(*out.qa);
  std::lock_guard g(mu_);
  outcomes_[a.run.value()] = std::move(out);
}

void Simulation::audit_er(const ErAssignment& a, const LoggingManager& lm, EventStore& store,
                          const std::vector<std::string>& collections, RunOutcome& out) {
  const auto run = a.run.str();
  const auto decisions = lm.decisions();
  const auto n = plan_.events_per_run;
  auto ledger = audit_decisions(decisions, n);
  for (const auto& v : ledger.violations) violation("ledger", fmt::format("run {}: {}", run, v));
  if (!out.summary.balanced()) violation("ledger", fmt::format("run {}: counters do not balance", run));

  // Final disposition of every event, from the ledger alone.
  std::vector<Decision::Kind> final(n, Decision::hello);
  for (const auto& d : decisions)
    if (d.event_id < n && (d.kind == Decision::committed || d.kind == Decision::filtered || d.kind == Decision::quarantine))
      final[d.event_id] = d.kind;

  const auto& all_events = collections.front();
  const auto stored = store.event_ids(all_events);
  std::vector<std::uint32_t> expected;
  for (std::uint32_t i = 0; i < n; ++i)
    if (final[i] == Decision::committed) expected.push_back(i);
  std::vector<std::uint32_t> got(stored.begin(), stored.end());
  std::sort(got.begin(), got.end());
  if (got != expected)
    violation("store", fmt::format("run {}: {} AllEvents records for {} committed events", run, got.size(),
                                   expected.size()));
  if (out.summary.committed != expected.size())
    violation("store", fmt::format("run {}: LM counts {} committed, ledger {}", run, out.summary.committed,
                                   expected.size()));

  const auto k = plan_.truth.subsystems();
  std::vector<double> sum(k, 0), sum_abs(k, 0);
  QaInput qa;
  qa.run = a.run;
  qa.residuals.assign(k, {});
  std::uint64_t bad_calib = 0;
  for (auto id : expected) {
    auto rec = store.find(all_events, id);
    if (!rec) continue;
    auto reco = RecoOutput::deserialize(rec->payload);
    if (reco.calib_validity != a.calib_validity || reco.calib_version != a.calib_version) ++bad_calib;
    const bool sample = qa.residuals[0].size() < plan_.qa_sample;
    for (std::size_t s = 0; s < k && s < reco.corrected.size(); ++s) {
      const double r = reco.corrected[s] - plan_.truth.hidden_quantity(a.run, id, s);
      sum[s] += r;
      sum_abs[s] += std::abs(r);
      out.sum_abs += std::abs(r);
      if (sample) qa.residuals[s].push_back(r);
    }
  }
  if (bad_calib)
    violation("calibration", fmt::format("run {}: {} records not reconstructed with {}", run, bad_calib, a.calib_version));
  out.n_residual = expected.size();
  const double m = expected.empty() ? 1.0 : static_cast<double>(expected.size());
  for (std::size_t s = 0; s < k; ++s) {
    out.residual_mean.push_back(sum[s] / m);
    out.residual_mean_abs.push_back(sum_abs[s] / m);
  }
  qa.accepted.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) qa.accepted[i] = final[i] == Decision::committed;
  QaOptions opts;
  opts.residual_tolerance = std::max(plan_.truth.noise_sigma, 1e-3);
  auto accept = cfg_.accept_fraction;
  opts.acceptance_low = std::max(0.0, accept - 0.025);
  opts.acceptance_high = std::min(1.0, accept + 0.025);
  out.qa = qa_check(qa, opts);
}

void Simulation::coordinate() {
  std::list<std::thread> jobs;
  auto launch = [&](auto fn) {
    ++active_;
    jobs.emplace_back([this, fn] {
      try {
        fn();
      } catch (const std::exception& e) {
        violation("control", e.what());
      }
      --active_;
    });
  };
  while (true) {
    bool launched = false;
    try {
      if (auto pc = orch_->dispatch_pc()) {
        launch([this, a = *pc] { pc_job(a); });
        launched = true;
      }
      for (auto& a : orch_->dispatch_er()) {
        launch([this, a] { er_job(a); });
        launched = true;
      }
    } catch (const std::exception& e) {
      violation("control", e.what());
      break;
    }
    if (!launched && active_ == 0) {
      if (orch_->all_done()) break;
      if (!orch_->next_available()) {
        for (const auto& r : orch_->runs())
          if (r.phase != Phase::done)
            violation("runs", fmt::format("run {} stopped in {}{}", r.run.str(), to_string(r.phase),
                                          r.reason.empty() ? "" : ": " + r.reason));
        break;
      }
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  for (auto& t : jobs) t.join();
}

void Simulation::final_audits() {
  const auto log = orch_->log();
  auto control = audit_control_log(log, plan_.mode, er_ids_);
  for (const auto& v : control.violations) violation("control", v);
  // The file copy of the log must replay to the same entries.
  auto replayed = read_control_log(work_ / "control.jsonl");
  if (replayed.size() != log.size()) violation("control", "log file does not match the in-memory log");

  for (auto v : conditions_->validity_starts(kPcFederation)) {
    const auto src = conditions_->entry_bytes(kPcFederation, v);
    for (const auto& farm : er_ids_)
      if (conditions_->entry_bytes(er_federation(farm), v) != src)
        violation("fanout", fmt::format("{} differs from PC at validity {}", er_federation(farm), v.str()));
  }

  std::map<std::uint32_t, RunOutcome> outcomes;
  std::map<std::uint32_t, RollingCalibration> calibrations;
  {
    std::lock_guard g(mu_);
    outcomes = outcomes_;
    calibrations = calibrations_;
  }
  for (const auto& r : orch_->runs()) {
    if (r.phase != Phase::done) continue;
    const auto er = bookkeeping_->latest_good(r.run, Pass::ER);
    const auto pc = bookkeeping_->latest_good(r.run, Pass::PC);
    if (!pc) violation("bookkeeping", fmt::format("run {} has no finished PC attempt", r.run.str()));
    if (!er) {
      violation("bookkeeping", fmt::format("run {} has no finished ER attempt", r.run.str()));
      continue;
    }
    if (!er->counters.balanced()) violation("bookkeeping", fmt::format("run {} counters do not balance", r.run.str()));
    auto it = outcomes.find(r.run.value());
    if (it == outcomes.end()) continue;
    if (er->calib_version != it->second.calib_version)
      violation("bookkeeping", fmt::format("run {} booked {} but used {}", r.run.str(),
                                           er->calib_version.value_or("-"), it->second.calib_version));
    // Two-pass reads the run's own constants; one-pass the newest strictly earlier.
    std::optional<RunId> want;
    for (const auto& [v, c] : calibrations)
      if (plan_.mode == LookupMode::two_pass ? v <= r.run.value() : v < r.run.value()) want = RunId(v);
    if (want != it->second.calib_validity)
      violation("calibration", fmt::format("run {} used validity {}, expected {}", r.run.str(),
                                           it->second.calib_validity.str(), want ? want->str() : "none"));
  }

  for (const auto& farm : metrics_.farms()) {
    std::uint64_t integral = 0;
    for (const auto& p : metrics_.rate_series(farm)) integral += p.events;
    const auto counted = counters_.at(farm)->load();
    if (integral != counted || metrics_.total(farm) != counted)
      violation("metrics", fmt::format("{}: series integrates to {}, counter is {}", farm, integral, counted));
  }
}

void Simulation::export_stores() {
  std::map<std::string, std::vector<fs::path>> files;
  for (auto& [id, f] : er_) {
    for (const auto& info : f.store->files()) files[id].push_back(info.path);
    if (f.server) f.server->stop();
    f.server.reset();
    f.store.reset();
  }
  // One cycle per farm: database file names repeat across farms.
  std::size_t total = 0, verified = 0;
  std::uint64_t copies = 0, alerts = 0;
  for (const auto& [id, list] : files) {
    ExportOptions opts;
    opts.cycle_id = "sim-" + id;
    opts.dest_dir = work_ / "exported" / id;
    opts.status_log = work_ / fmt::format("export-{}.jsonl", id);
    opts.alert = [this](const std::string& key, const std::string& msg) {
      alerts_.raise(Severity::critical, "export", msg, key);
    };
    fs::create_directories(opts.dest_dir);
    auto rep = run_export(list, opts);
    total += list.size();
    copies += rep.copies;
    alerts += rep.alerts;
    if (rep.cycle.files.size() != list.size())
      violation("export", fmt::format("{}: {} files in the cycle, {} in the store", id, rep.cycle.files.size(), list.size()));
    for (const auto& [name, f] : rep.cycle.files) {
      if (f.state == ExportState::verified) ++verified;
      else violation("export", fmt::format("{}/{} ended {}: {}", id, name, to_string(f.state), f.qa_error));
    }
  }
  export_json_ = {{"files", total}, {"verified", verified}, {"copies", copies}, {"alerts", alerts}};
}

SimulationReport Simulation::report() {
  nlohmann::json runs = nlohmann::json::array();
  nlohmann::json er_runtime = nlohmann::json::array();
  double total_abs = 0;
  std::uint64_t total_n = 0;
  for (const auto& r : orch_->runs()) {
    nlohmann::json j = {{"run", r.run.value()}, {"phase", std::string(to_string(r.phase))}};
    std::lock_guard g(mu_);
    if (auto c = calibrations_.find(r.run.value()); c != calibrations_.end()) j["calibration"] = calibration_json(c->second);
    if (auto o = outcomes_.find(r.run.value()); o != outcomes_.end()) {
      const auto& out = o->second;
      j["er"] = {{"version", out.version},
                 {"calib_version", out.calib_version},
                 {"calib_validity", out.calib_validity.value()},
                 {"counters",
                  {{"read", out.summary.read},
                   {"filtered", out.summary.filtered_out},
                   {"committed", out.summary.committed},
                   {"killer", out.summary.killer}}},
                 {"killer_events", out.summary.killer_events}};
      nlohmann::json subs = nlohmann::json::array();
      double mean = 0, mean_abs = 0;
      for (std::size_t s = 0; s < out.residual_mean.size(); ++s) {
        subs.push_back({{"mean", out.residual_mean[s]}, {"mean_abs", out.residual_mean_abs[s]}});
        mean += out.residual_mean[s] / out.residual_mean.size();
        mean_abs += out.residual_mean_abs[s] / out.residual_mean.size();
      }
      j["residual"] = {{"mean", mean}, {"mean_abs", mean_abs}, {"subsystems", subs}};
      j["qa"] = out.qa ? out.qa->to_json() : nlohmann::json();
      total_abs += out.sum_abs;
      total_n += out.n_residual * out.residual_mean.size();
      er_runtime.push_back({{"run", r.run.value()},
                            {"farm", out.farm},
                            {"redelivered", out.summary.redelivered},
                            {"wall_s", out.summary.wall_s}});
    }
    runs.push_back(std::move(j));
  }

  const double gap_min_s = 2 * plan_.metrics_period_s;
  nlohmann::json farms = nlohmann::json::array();
  for (const auto& spec : specs_) {
    auto series = series_json(metrics_.rate_series(spec.id));
    nlohmann::json gaps = nlohmann::json::array();
    for (const auto& [a, b] : rate_gaps(series, gap_min_s)) gaps.push_back({a, b});
    farms.push_back({{"id", spec.id},
                     {"kind", spec.kind == FarmKind::PC ? "PC" : "ER"},
                     {"workers", spec.workers},
                     {"total_events", counters_.at(spec.id)->load()},
                     {"gaps", gaps},
                     {"rate", series}});
  }
  nlohmann::json alerts = nlohmann::json::array();
  for (const auto& a : alerts_.all()) alerts.push_back(a.to_json());

  const std::vector<std::string> audit_names = {"import",      "ledger",  "store",   "calibration", "control",
                                                "fanout",      "bookkeeping", "metrics", "export",  "er", "runs"};
  nlohmann::json audits = nlohmann::json::object();
  std::lock_guard g(mu_);
  for (const auto& name : audit_names) {
    auto it = audit_detail_.find(name);
    audits[name] = {{"ok", it == audit_detail_.end()},
                    {"detail", it == audit_detail_.end() ? std::vector<std::string>{} : it->second}};
  }
  nlohmann::json j = {
      {"ok", violations_.empty()},
      {"violations", violations_},
      {"plan", plan_.to_json()},
      {"deterministic", {{"runs", runs}, {"mean_abs_residual", total_n ? total_abs / total_n : 0.0}}},
      {"runtime",
       {{"wall_s", wall_s_},
        {"workers_spawned", next_worker_.load() - 1},
        {"worker_crashes", crashes_.load()},
        {"redelivered", redelivered_.load()},
        {"gap_min_s", gap_min_s},
        {"er_runs", er_runtime},
        {"farms", farms},
        {"import", import_json_},
        {"export", export_json_},
        {"alerts", alerts}}},
      {"audits", audits},
  };
  return SimulationReport{std::move(j)};
}

SimulationReport Simulation::run() {
  generate();
  import_files();

  conditions_ = std::make_unique<ConditionsStore>(work_ / "conditions");
  bookkeeping_ = std::make_unique<Bookkeeping>(work_ / "bookkeeping.jsonl");
  for (std::uint32_t i = 1; i <= plan_.pc_farms; ++i)
    specs_.push_back({fmt::format("pc-{}", i), FarmKind::PC, plan_.pc_workers, {}});
  for (std::uint32_t i = 1; i <= plan_.er_farms; ++i) {
    specs_.push_back({fmt::format("er-{}", i), FarmKind::ER, plan_.er_workers, {}});
    er_ids_.insert(specs_.back().id);
  }
  ControlOptions copts;
  copts.mode = plan_.mode;
  copts.pc_deadtime_s = plan_.pc_deadtime_s;
  copts.er_deadtime_s = plan_.er_deadtime_s;
  copts.log = work_ / "control.jsonl";
  orch_ = std::make_unique<Orchestrator>(specs_, *conditions_, *bookkeeping_, alerts_, copts, [this] { return now(); });

  for (const auto& spec : specs_) {
    counters_[spec.id] = std::make_unique<std::atomic<std::uint64_t>>(0);
    auto* c = counters_[spec.id].get();
    metrics_.add_source(spec.id, [c]() -> std::optional<std::uint64_t> { return c->load(); });
  }
  for (const auto& id : er_ids_) {
    auto opts = StoreOptions::from(cfg_, work_ / id / "store");
    opts.active_clients = plan_.er_workers;
    ErFarm f{id, std::make_unique<EventStore>(opts), nullptr};
    if (!plan_.in_process) f.server = std::make_unique<StoreServer>(*f.store, Endpoint::parse("127.0.0.1:0"));
    er_.emplace(id, std::move(f));
  }
  if (!plan_.in_process) conditions_server_ = std::make_unique<ConditionsServer>(*conditions_, Endpoint::parse("127.0.0.1:0"));

  std::unique_ptr<ControlServer> api;
  if (plan_.api_port) {
    ApiHooks hooks;
    hooks.orchestrator = orch_.get();
    hooks.alerts = &alerts_;
    hooks.metrics = &metrics_;
    hooks.import_status = [this] {
      std::lock_guard g(import_mu_);
      return import_json_;
    };
    hooks.clock = [this] { return now(); };
    api = std::make_unique<ControlServer>(hooks, "127.0.0.1", *plan_.api_port);
    spdlog::info("control API on 127.0.0.1:{}", api->port());
  }

  seed_conditions();
  for (std::uint32_t i = 0; i < plan_.runs; ++i) {
    const RunId run(plan_.first_run + i);
    const auto path = work_ / "xtc" / run_file(run);
    if (fs::exists(path)) orch_->submit_run(run, path);
    else violation("import", fmt::format("run {} never arrived", run.str()));
  }

  metrics_.collect();
  metrics_.start(plan_.metrics_period_s);
  coordinate();
  metrics_.stop();
  metrics_.collect();
  wall_s_ = now();

  if (conditions_server_) conditions_server_->stop();
  final_audits();
  export_stores();
  if (api) api->stop();
  return report();
}

}  // namespace

SimulationReport simulate(const SimulationPlan& plan, const fs::path& work_dir) {
  plan.validate();
  std::error_code ec;
  fs::remove_all(work_dir, ec);
  fs::create_directories(work_dir);
  Simulation sim(plan, work_dir);
  auto report = sim.run();
  std::ofstream(work_dir / "report.json") << report.json.dump(2) << '\n';
  return report;
}

// -- plots -----------------------------------------------------------------------

std::vector<std::pair<double, double>> rate_gaps(const nlohmann::json& series, double min_s) {
  std::vector<std::pair<double, double>> gaps;
  bool seen_activity = false;
  std::optional<double> start;
  double end = 0;
  for (const auto& p : series) {
    const double t0 = p.at("t0"), t1 = p.at("t1");
    const bool busy = p.at("events").get<std::uint64_t>() > 0;
    if (busy) {
      if (start && end - *start >= min_s) gaps.emplace_back(*start, end);
      start.reset();
      seen_activity = true;
    } else if (seen_activity) {
      if (!start) start = t0;
      end = t1;
    }
  }
  return gaps;
}

namespace {

struct SvgPlot {
  double w = 720, h = 300, margin = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  std::string body;

  double px(double x) const { return margin + (x - x0) / (x1 - x0) * (w - 2 * margin); }
  double py(double y) const { return h - margin - (y - y0) / (y1 - y0) * (h - 2 * margin); }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& colour) {
    std::string s;
    for (const auto& [x, y] : pts) s += fmt::format("{:.2f},{:.2f} ", px(x), py(y));
    body += fmt::format(R"(<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>)", colour, s) + "\n";
  }
  void shade(double a, double b) {
    body += fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" fill="#f4c7c3" opacity="0.6"/>)",
                        px(a), py(y1), px(b) - px(a), py(y0) - py(y1)) +
            "\n";
  }
  std::string render(const std::string& title, const std::string& xlabel, const std::string& ylabel) const {
    std::string s = fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">)", w, h) + "\n";
    s += fmt::format(R"(<rect width="{}" height="{}" fill="white"/>)", w, h) + "\n";
    s += body;
    s += fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>)", margin, h - margin, w - margin) + "\n";
    s += fmt::format(R"(<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>)", margin, h - margin, margin) + "\n";
    s += fmt::format(R"(<text x="{}" y="20" text-anchor="middle">{}</text>)", w / 2, title) + "\n";
    s += fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{}</text>)", w / 2, h - 12, xlabel) + "\n";
    s += fmt::format(R"svg(<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>)svg", h / 2, h / 2, ylabel) + "\n";
    s += fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{:.3g}</text>)", margin - 4, py(y1) + 4, y1) + "\n";
    s += fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{:.3g}</text>)", margin - 4, py(y0) + 4, y0) + "\n";
    s += fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{:.3g}</text>)", px(x0), h - margin + 14, x0) + "\n";
    s += fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{:.3g}</text>)", px(x1), h - margin + 14, x1) + "\n";
    return s + "</svg>\n";
  }
};

void write_text(const fs::path& p, const std::string& s, PlotSummary& out) {
  std::ofstream f(p);
  f << s;
  if (!f) throw Error(fmt::format("cannot write {}", p.string()));
  out.files.push_back(p);
}

}  // namespace

PlotSummary plot(const nlohmann::json& report, const fs::path& out_dir) {
  PlotSummary out;
  fs::create_directories(out_dir);
  const auto& runtime = report.at("runtime");
  const double gap_min_s = runtime.value("gap_min_s", 0.1);

  for (const auto& farm : runtime.at("farms")) {
    const std::string id = farm.at("id");
    const auto& series = farm.at("rate");
    const std::uint64_t total = farm.at("total_events");
    std::string csv = "t0,t1,events,rate\n";
    double area = 0, tmax = 0, rmax = 0;
    std::vector<std::pair<double, double>> steps;
    for (const auto& p : series) {
      const double t0 = p.at("t0"), t1 = p.at("t1"), rate = p.at("rate");
      csv += fmt::format("{:.6f},{:.6f},{},{:.6f}\n", t0, t1, p.at("events").get<std::uint64_t>(), rate);
      area += rate * (t1 - t0);
      steps.emplace_back(t0, rate);
      steps.emplace_back(t1, rate);
      tmax = std::max(tmax, t1);
      rmax = std::max(rmax, rate);
    }
    write_text(out_dir / fmt::format("rate_{}.csv", id), csv, out);
    out.areas[id] = {area, total};
    if (std::abs(area - static_cast<double>(total)) > 1e-6 * std::max(1.0, static_cast<double>(total)))
      out.problems.push_back(fmt::format("{}: plotted area {:.3f} differs from {} events", id, area, total));
    out.gaps[id] = rate_gaps(series, gap_min_s);

    SvgPlot svg;
    svg.x1 = tmax > 0 ? tmax : 1;
    svg.y1 = rmax > 0 ? rmax * 1.1 : 1;
    for (const auto& [a, b] : out.gaps[id]) svg.shade(a, b);
    svg.polyline(steps, "#1f77b4");
    write_text(out_dir / fmt::format("rate_{}.svg", id), svg.render(fmt::format("{} processing rate", id), "time (s)", "events/s"), out);
  }

  // Residual histograms summed over runs, per subsystem.
  std::map<std::string, std::pair<std::vector<double>, std::vector<std::uint64_t>>> sums;
  for (const auto& r : report.at("deterministic").at("runs")) {
    if (!r.contains("qa") || r["qa"].is_null()) continue;
    for (const auto& h : r["qa"].at("histograms")) {
      const std::string q = h.at("quantity");
      if (q.rfind("residual", 0) != 0) continue;
      auto edges = h.at("edges").get<std::vector<double>>();
      auto counts = h.at("counts").get<std::vector<std::uint64_t>>();
      auto& [e, c] = sums[q];
      if (e.empty()) {
        e = edges;
        c.assign(counts.size(), 0);
      }
      if (e != edges) {
        out.problems.push_back(fmt::format("{} binning differs between runs", q));
        continue;
      }
      for (std::size_t i = 0; i < counts.size(); ++i) c[i] += counts[i];
    }
  }
  std::string csv = "quantity,lo,hi,count\n";
  SvgPlot svg;
  double lo = 0, hi = 1, cmax = 1;
  for (const auto& [q, ec] : sums) {
    lo = std::min(lo, ec.first.front());
    hi = std::max(hi == 1 ? ec.first.back() : hi, ec.first.back());
    for (auto c : ec.second) cmax = std::max(cmax, static_cast<double>(c));
  }
  svg.x0 = lo;
  svg.x1 = hi > lo ? hi : lo + 1;
  svg.y1 = cmax * 1.1;
  static const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  std::size_t ci = 0;
  for (const auto& [q, ec] : sums) {
    std::vector<std::pair<double, double>> steps;
    for (std::size_t i = 0; i < ec.second.size(); ++i) {
      csv += fmt::format("{},{:.6f},{:.6f},{}\n", q, ec.first[i], ec.first[i + 1], ec.second[i]);
      steps.emplace_back(ec.first[i], static_cast<double>(ec.second[i]));
      steps.emplace_back(ec.first[i + 1], static_cast<double>(ec.second[i]));
    }
    svg.polyline(steps, colours[ci++ % 6]);
  }
  write_text(out_dir / "residuals.csv", csv, out);
  write_text(out_dir / "residuals.svg", svg.render("reconstructed minus true", "residual", "events"), out);
  return out;
}

}  // namespace promptreco
