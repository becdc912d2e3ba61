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

// The control system: run scheduling across PC and ER farms, calibration
// fan-out, alerts, QA histograms, farm rate metrics and the HTTP API.
//
// Run phases:
//
//   queued -> staging -> pc_running -> conditions_ready -> er_dispatchable -> er_running -> done
//   queued, staging, pc_running, conditions_ready, er_running -> failed
//   queued, failed, er_dispatchable -> held -> (the phase it was held from)
//   done, failed -> queued | er_dispatchable      (resubmission)
//
// PC runs start strictly in ascending run order. A failed run at the head of
// the PC queue stalls it until an operator holds the run.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/bookkeeping.hpp"
#include "promptreco/conditions.hpp"

namespace httplib {
class Server;
}

namespace promptreco {

class Monitor;

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// -- phases ----------------------------------------------------------------------

enum class Phase : std::uint8_t {
  queued,
  staging,
  pc_running,
  conditions_ready,
  er_dispatchable,
  er_running,
  done,
  failed,
  held,
};
std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view s);

/// Edges of the phase graph. Release from held is checked separately.
bool transition_allowed(Phase from, Phase to);

// -- alerts ----------------------------------------------------------------------

enum class Severity : std::uint8_t { info, warning, critical };
std::string_view to_string(Severity s);

struct Alert {
  std::uint64_t id = 0;
  Severity severity = Severity::warning;
  std::string source;
  std::string message;
  std::string key;  // repeats of an unacknowledged key are folded into one alert
  double created = 0;
  double last_seen = 0;
  std::uint32_t occurrences = 1;
  bool acknowledged = false;
  std::optional<double> acknowledged_at;
  nlohmann::json to_json() const;
};

class AlertSink {
 public:
  virtual ~AlertSink() = default;
  virtual void deliver(const Alert& a) = 0;
};

class LogSink : public AlertSink {
 public:
  void deliver(const Alert& a) override;
};

/// POSTs each new alert as JSON to http://host:port/path.
class WebhookSink : public AlertSink {
 public:
  explicit WebhookSink(std::string url);
  void deliver(const Alert& a) override;
  std::uint64_t failures() const { return failures_.load(); }

 private:
  std::string host_;
  int port_ = 80;
  std::string path_ = "/";
  std::atomic<std::uint64_t> failures_{0};
};

class MemorySink : public AlertSink {
 public:
  void deliver(const Alert& a) override;
  std::vector<Alert> alerts() const;

 private:
  mutable std::mutex mu_;
  std::vector<Alert> alerts_;
};

class AlertBook {
 public:
  using Clock = std::function<double()>;
  explicit AlertBook(Clock clock = {});

  void add_sink(std::shared_ptr<AlertSink> sink);
  /// Sinks see a new alert once; a repeat of an open key only bumps its count.
  std::uint64_t raise(Severity severity, std::string source, std::string message, std::string key = {});
  /// Operator acknowledgement. False when the id is unknown.
  bool acknowledge(std::uint64_t id);
  std::vector<Alert> all() const;
  std::vector<Alert> open() const;
  std::optional<Alert> get(std::uint64_t id) const;

 private:
  Clock clock_;
  mutable std::mutex mu_;
  std::vector<Alert> alerts_;
  std::vector<std::shared_ptr<AlertSink>> sinks_;
};

// -- QA --------------------------------------------------------------------------

struct QaHistogram {
  std::string quantity;
  RunId run;
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<std::uint64_t> counts;
  std::uint64_t entries = 0;  // values outside the edges land in the end bins
  double mean = 0;            // of the raw values
  double reference = 0;
  double tolerance = 0;

  bool in_band() const;
  nlohmann::json to_json() const;
};

QaHistogram make_histogram(std::string quantity, RunId run, const std::vector<double>& values, double lo, double hi,
                           std::size_t bins, double reference, double tolerance);

struct QaInput {
  RunId run;
  /// Reconstructed minus true quantity, per subsystem, for a sample of accepted events.
  std::vector<std::vector<double>> residuals;
  /// Filter decision of every event read, in file order.
  std::vector<bool> accepted;
};

struct QaOptions {
  double residual_tolerance = 0.05;
  double acceptance_low = 0.35;
  double acceptance_high = 0.40;
  std::size_t acceptance_block = 200;  // events per acceptance-fraction entry
  std::size_t bins = 40;
};

struct QaReport {
  RunId run;
  std::vector<QaHistogram> histograms;
  std::vector<std::string> failures;
  bool passed() const { return failures.empty(); }
  nlohmann::json to_json() const;
};

QaReport qa_check(const QaInput& input, const QaOptions& opts = {});

// -- metrics ---------------------------------------------------------------------

struct RatePoint {
  double t0 = 0;
  double t1 = 0;
  std::uint64_t events = 0;
  double rate() const { return t1 > t0 ? static_cast<double>(events) / (t1 - t0) : 0.0; }
};

/// Samples cumulative per-farm input counters and turns them into rate series.
class MetricsCollector {
 public:
  using Source = std::function<std::optional<std::uint64_t>()>;  // nullopt when unreachable
  using Clock = std::function<double()>;

  MetricsCollector(Clock clock, AlertBook* alerts = nullptr, std::uint32_t miss_threshold = 3);

  void add_source(const std::string& farm, Source source);
  /// One sample of every source.
  void collect();
  std::vector<RatePoint> rate_series(const std::string& farm, double from = -1e300, double to = 1e300) const;
  std::uint64_t total(const std::string& farm) const;
  bool stale(const std::string& farm) const;
  std::vector<std::string> farms() const;
  double latest_rate(const std::string& farm) const;
  nlohmann::json to_json() const;

  /// Samples every `period_s` on a background thread until stopped.
  void start(double period_s);
  void stop();
  ~MetricsCollector();

 private:
  struct Track {
    Source source;
    std::optional<std::pair<double, std::uint64_t>> last;
    std::vector<RatePoint> points;
    std::uint32_t misses = 0;
    bool stale = false;
  };
  Clock clock_;
  AlertBook* alerts_;
  std::uint32_t miss_threshold_;
  mutable std::mutex mu_;
  std::map<std::string, Track> tracks_;
  std::thread thread_;
  std::condition_variable cv_;
  bool stop_ = false;
};

// -- orchestrator ----------------------------------------------------------------

enum class FarmKind : std::uint8_t { PC, ER };

struct FarmSpec {
  std::string id;
  FarmKind kind = FarmKind::ER;
  std::uint32_t workers = 64;
  std::vector<std::string> endpoints;
  void validate() const;
};

/// ER farms read calibrations from their own federation.
std::string er_federation(const std::string& farm);
inline const std::string kPcFederation = "PC";

struct LogEntry {
  enum Kind : std::uint8_t { transition, fanout } kind = transition;
  std::uint64_t seq = 0;
  double time = 0;
  RunId run;  // the run moved, or the validity start fanned out
  Phase from = Phase::queued;
  Phase to = Phase::queued;
  std::string farm;
  std::string detail;
  std::string federation;      // fanout
  std::string digest;          // fanout: entry bytes digest
  std::optional<RunId> calib;  // er_running: validity start looked up

  nlohmann::json to_json() const;
  static LogEntry from_json(const nlohmann::json& j);
};

struct ControlOptions {
  LookupMode mode = LookupMode::two_pass;
  std::string release = "14.5.2";
  double pc_deadtime_s = 0;  // conditions finalization after each PC run
  double er_deadtime_s = 0;  // store setup and cleanup after each ER run
  std::optional<std::filesystem::path> log;
};

struct PcAssignment {
  RunId run;
  std::string farm;
  std::filesystem::path xtc;
  std::uint64_t attempt = 0;
};

struct ErAssignment {
  RunId run;
  std::string farm;
  std::filesystem::path xtc;
  std::uint64_t attempt = 0;
  std::uint32_t version = 0;
  std::string calib_version;
  RunId calib_validity;
};

struct RunView {
  RunId run;
  Phase phase = Phase::queued;
  std::optional<Phase> held_from;
  std::string reason;
  std::string farm;
  std::filesystem::path xtc;
  std::optional<std::uint64_t> attempt;
  std::map<std::string, double> entered;  // phase name -> time of last entry
  nlohmann::json to_json() const;
};

struct FarmView {
  FarmSpec spec;
  std::optional<RunId> busy;
  bool paused = false;
  double available_at = 0;
  std::uint64_t completed = 0;
  nlohmann::json to_json() const;
};

/// Every state change is serialized under one lock, so the log is a total order.
class Orchestrator {
 public:
  using Clock = std::function<double()>;
  using FileCheck = std::function<bool(const std::filesystem::path&)>;

  Orchestrator(std::vector<FarmSpec> farms, ConditionsStore& conditions, Bookkeeping& bookkeeping, AlertBook& alerts,
               ControlOptions opts = {}, Clock clock = {}, FileCheck file_exists = {});

  /// New runs are queued; a done or failed run whose calibration already
  /// exists goes straight to ER. ConflictError when the run is active.
  RunView submit_run(RunId run, std::filesystem::path xtc);
  /// Starting constants published and fanned out before the first PC run.
  void seed_calibration(const RollingCalibration& cal);
  /// Next PC run on an idle PC farm, lowest first, never skipping a failed one.
  std::optional<PcAssignment> dispatch_pc();
  void on_pc_complete(RunId run, const RollingCalibration& cal);
  void on_pc_failed(RunId run, const std::string& reason);
  /// Assigns ready runs to idle ER farms: fewest pending farm, lowest run first.
  std::vector<ErAssignment> dispatch_er();
  void on_er_complete(RunId run, const AttemptCounters& counters);
  void on_er_failed(RunId run, const std::string& reason, const AttemptCounters& counters = {});
  void record_qa(const QaReport& report);

  void hold(RunId run);
  void release(RunId run);
  void pause_farm(const std::string& farm);
  void resume_farm(const std::string& farm);

  /// True when no run can make further progress without outside input.
  bool idle() const;
  bool all_done() const;
  std::optional<double> next_available() const;

  RunView run(RunId run) const;
  std::vector<RunView> runs() const;
  std::vector<FarmView> farms() const;
  std::optional<QaReport> qa(RunId run) const;
  std::vector<LogEntry> log() const;
  std::optional<RunId> pc_high_water() const;
  const ControlOptions& options() const { return opts_; }
  nlohmann::json status_json() const;

 private:
  struct RunRec {
    RunView view;
  };
  struct FarmRec {
    FarmView view;
  };
  RunRec& find_run_locked(RunId run);
  FarmRec& find_farm_locked(const std::string& id);
  void move_locked(RunRec& r, Phase to, std::string detail = {}, std::optional<RunId> calib = std::nullopt);
  void fail_locked(RunRec& r, const std::string& where, const std::string& reason);
  void append_locked(LogEntry e);
  void fanout_locked(RunId validity);
  bool farm_ready_locked(const FarmRec& f, double now) const;

  ConditionsStore& conditions_;
  Bookkeeping& bookkeeping_;
  AlertBook& alerts_;
  ControlOptions opts_;
  Clock clock_;
  FileCheck file_exists_;
  mutable std::mutex mu_;
  std::map<std::uint32_t, RunRec> runs_;
  std::vector<FarmRec> farms_;
  std::map<std::uint32_t, QaReport> qa_;
  std::vector<LogEntry> log_;
  std::ofstream log_out_;
  std::optional<RunId> pc_high_water_;
};

struct ControlAudit {
  std::vector<std::string> violations;
  std::uint64_t pc_starts = 0;
  std::uint64_t er_starts = 0;
  std::uint64_t fanouts = 0;
  bool ok() const { return violations.empty(); }
};

/// Replays a control log and checks the phase graph, ascending PC starts,
/// in-order start (no lower run left queued), and that every ER start on a
/// farm used the newest calibration already fanned out to that farm which
/// covers the run under `mode`.
ControlAudit audit_control_log(const std::vector<LogEntry>& log, LookupMode mode,
                               const std::set<std::string>& er_farms);
std::vector<LogEntry> read_control_log(const std::filesystem::path& path);

// -- HTTP API --------------------------------------------------------------------

struct ApiHooks {
  Orchestrator* orchestrator = nullptr;
  AlertBook* alerts = nullptr;
  MetricsCollector* metrics = nullptr;
  Monitor* monitor = nullptr;
  std::function<nlohmann::json()> import_status;
  std::function<double()> clock;
};

/// JSON over HTTP. Errors carry {"error": message} with 400, 404 or 409.
class ControlServer {
 public:
  ControlServer(ApiHooks hooks, const std::string& host, int port);
  ~ControlServer();
  int port() const { return port_; }
  void stop();

 private:
  ApiHooks hooks_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace promptreco
