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

#include "promptreco/control.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <tuple>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "promptreco/bytes.hpp"

namespace promptreco {

namespace {

double wall_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

constexpr std::array<std::string_view, 9> kPhaseNames = {
    "queued", "staging", "pc_running", "conditions_ready", "er_dispatchable", "er_running", "done", "failed", "held"};

}  // namespace

std::string_view to_string(Phase p) { return kPhaseNames.at(static_cast<std::size_t>(p)); }

Phase phase_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kPhaseNames.size(); ++i)
    if (kPhaseNames[i] == s) return static_cast<Phase>(i);
  throw ConfigError(fmt::format("unknown run phase '{}'", s));
}

bool transition_allowed(Phase from, Phase to) {
  using P = Phase;
  switch (from) {
    case P::queued: return to == P::staging || to == P::failed || to == P::held;
    case P::staging: return to == P::pc_running || to == P::failed;
    case P::pc_running: return to == P::conditions_ready || to == P::failed;
    case P::conditions_ready: return to == P::er_dispatchable || to == P::failed;
    case P::er_dispatchable: return to == P::er_running || to == P::held;
    case P::er_running: return to == P::done || to == P::failed;
    case P::done: return to == P::queued || to == P::er_dispatchable;
    case P::failed: return to == P::queued || to == P::er_dispatchable || to == P::held;
    case P::held: return to == P::queued || to == P::failed || to == P::er_dispatchable;
  }
  return false;
}

// -- alerts ----------------------------------------------------------------------

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::info: return "info";
    case Severity::warning: return "warning";
    case Severity::critical: return "critical";
  }
  return "?";
}

nlohmann::json Alert::to_json() const {
  return {{"id", id},
          {"severity", to_string(severity)},
          {"source", source},
          {"message", message},
          {"key", key},
          {"created", created},
          {"last_seen", last_seen},
          {"occurrences", occurrences},
          {"acknowledged", acknowledged},
          {"acknowledged_at", acknowledged_at ? nlohmann::json(*acknowledged_at) : nlohmann::json()}};
}

void LogSink::deliver(const Alert& a) {
  const auto lvl = a.severity == Severity::critical ? spdlog::level::err
                   : a.severity == Severity::warning ? spdlog::level::warn
                                                     : spdlog::level::info;
  spdlog::log(lvl, "alert #{} [{}] {}: {}", a.id, to_string(a.severity), a.source, a.message);
}

WebhookSink::WebhookSink(std::string url) {
  std::string_view u = url;
  if (u.rfind("http://", 0) == 0) u.remove_prefix(7);
  const auto slash = u.find('/');
  const auto hostport = u.substr(0, slash);
  if (slash != std::string_view::npos) path_ = std::string(u.substr(slash));
  const auto colon = hostport.rfind(':');
  host_ = std::string(hostport.substr(0, colon));
  if (colon != std::string_view::npos) port_ = std::stoi(std::string(hostport.substr(colon + 1)));
  if (host_.empty()) throw ConfigError(fmt::format("webhook url '{}' has no host", url));
}

void WebhookSink::deliver(const Alert& a) {
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(std::chrono::seconds(1));
  cli.set_read_timeout(std::chrono::seconds(2));
  auto res = cli.Post(path_, a.to_json().dump(), "application/json");
  if (!res || res->status / 100 != 2) {
    ++failures_;
    spdlog::warn("alert webhook {}:{}{} failed for alert #{}", host_, port_, path_, a.id);
  }
}

void MemorySink::deliver(const Alert& a) {
  std::lock_guard lock(mu_);
  alerts_.push_back(a);
}

std::vector<Alert> MemorySink::alerts() const {
  std::lock_guard lock(mu_);
  return alerts_;
}

AlertBook::AlertBook(Clock clock) : clock_(clock ? std::move(clock) : Clock(wall_now)) {}

void AlertBook::add_sink(std::shared_ptr<AlertSink> sink) {
  std::lock_guard lock(mu_);
  sinks_.push_back(std::move(sink));
}

std::uint64_t AlertBook::raise(Severity severity, std::string source, std::string message, std::string key) {
  Alert fresh;
  std::vector<std::shared_ptr<AlertSink>> sinks;
  {
    std::lock_guard lock(mu_);
    const double now = clock_();
    if (!key.empty()) {
      for (auto& a : alerts_) {
        if (a.key == key && !a.acknowledged) {
          ++a.occurrences;
          a.last_seen = now;
          return a.id;
        }
      }
    }
    fresh.id = alerts_.size() + 1;
    fresh.severity = severity;
    fresh.source = std::move(source);
    fresh.message = std::move(message);
    fresh.key = std::move(key);
    fresh.created = fresh.last_seen = now;
    alerts_.push_back(fresh);
    sinks = sinks_;
  }
  for (const auto& s : sinks) s->deliver(fresh);
  return fresh.id;
}

bool AlertBook::acknowledge(std::uint64_t id) {
  std::lock_guard lock(mu_);
  if (id == 0 || id > alerts_.size()) return false;
  auto& a = alerts_[id - 1];
  if (!a.acknowledged) {
    a.acknowledged = true;
    a.acknowledged_at = clock_();
  }
  return true;
}

std::vector<Alert> AlertBook::all() const {
  std::lock_guard lock(mu_);
  return alerts_;
}

std::vector<Alert> AlertBook::open() const {
  std::lock_guard lock(mu_);
  std::vector<Alert> out;
  for (const auto& a : alerts_)
    if (!a.acknowledged) out.push_back(a);
  return out;
}

std::optional<Alert> AlertBook::get(std::uint64_t id) const {
  std::lock_guard lock(mu_);
  if (id == 0 || id > alerts_.size()) return std::nullopt;
  return alerts_[id - 1];
}

// -- QA --------------------------------------------------------------------------

bool QaHistogram::in_band() const { return std::abs(mean - reference) <= tolerance; }

nlohmann::json QaHistogram::to_json() const {
  return {{"quantity", quantity},   {"run", run.value()},     {"edges", edges},   {"counts", counts},
          {"entries", entries},     {"mean", mean},           {"reference", reference},
          {"tolerance", tolerance}, {"in_band", in_band()}};
}

QaHistogram make_histogram(std::string quantity, RunId run, const std::vector<double>& values, double lo, double hi,
                           std::size_t bins, double reference, double tolerance) {
  if (bins == 0 || !(hi > lo)) throw ConfigError("histogram needs at least one bin and hi > lo");
  QaHistogram h;
  h.quantity = std::move(quantity);
  h.run = run;
  h.reference = reference;
  h.tolerance = tolerance;
  h.edges.resize(bins + 1);
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + w * static_cast<double>(i);
  h.counts.assign(bins, 0);
  double sum = 0;
  for (double v : values) {
    const auto raw = std::floor((v - lo) / w);
    const auto idx = static_cast<std::size_t>(std::clamp(raw, 0.0, static_cast<double>(bins - 1)));
    ++h.counts[idx];
    sum += v;
  }
  h.entries = values.size();
  h.mean = values.empty() ? 0.0 : sum / static_cast<double>(values.size());
  return h;
}

nlohmann::json QaReport::to_json() const {
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : histograms) hs.push_back(h.to_json());
  return {{"run", run.value()}, {"passed", passed()}, {"failures", failures}, {"histograms", hs}};
}

QaReport qa_check(const QaInput& in, const QaOptions& opts) {
  QaReport r;
  r.run = in.run;
  const double tol = opts.residual_tolerance;
  for (std::size_t k = 0; k < in.residuals.size(); ++k) {
    const auto& vals = in.residuals[k];
    if (vals.empty()) continue;
    auto h = make_histogram(fmt::format("residual[{}]", k), in.run, vals, -10 * tol, 10 * tol, opts.bins, 0.0, tol);
    if (!h.in_band())
      r.failures.push_back(fmt::format("{} mean {:.4f} outside 0 +- {:.4f}", h.quantity, h.mean, h.tolerance));
    r.histograms.push_back(std::move(h));
  }
  if (!in.accepted.empty()) {
    const std::size_t block = std::max<std::size_t>(1, std::min(opts.acceptance_block, in.accepted.size()));
    std::vector<double> fractions;
    std::uint64_t accepted_total = 0;
    for (std::size_t i = 0; i + block <= in.accepted.size(); i += block) {
      const auto n = static_cast<std::size_t>(std::count(in.accepted.begin() + static_cast<std::ptrdiff_t>(i),
                                                         in.accepted.begin() + static_cast<std::ptrdiff_t>(i + block), true));
      fractions.push_back(static_cast<double>(n) / static_cast<double>(block));
    }
    accepted_total = static_cast<std::uint64_t>(std::count(in.accepted.begin(), in.accepted.end(), true));
    const double ref = 0.5 * (opts.acceptance_low + opts.acceptance_high);
    const double band = 0.5 * (opts.acceptance_high - opts.acceptance_low);
    auto h = make_histogram("acceptance", in.run, fractions, 0.0, 1.0, 20, ref, band);
    // The band applies to the whole run, not the mean of whole blocks.
    h.mean = static_cast<double>(accepted_total) / static_cast<double>(in.accepted.size());
    if (!h.in_band())
      r.failures.push_back(fmt::format("acceptance {:.4f} outside [{}, {}]", h.mean, opts.acceptance_low,
                                       opts.acceptance_high));
    r.histograms.push_back(std::move(h));
  }
  return r;
}

// -- metrics ---------------------------------------------------------------------

MetricsCollector::MetricsCollector(Clock clock, AlertBook* alerts, std::uint32_t miss_threshold)
    : clock_(clock ? std::move(clock) : Clock(wall_now)), alerts_(alerts), miss_threshold_(miss_threshold) {}

MetricsCollector::~MetricsCollector() { stop(); }

void MetricsCollector::add_source(const std::string& farm, Source source) {
  std::lock_guard lock(mu_);
  tracks_[farm].source = std::move(source);
}

void MetricsCollector::collect() {
  std::vector<std::string> went_stale;
  {
    std::lock_guard lock(mu_);
    const double now = clock_();
    for (auto& [farm, t] : tracks_) {
      const auto v = t.source();
      if (!v) {
        if (++t.misses >= miss_threshold_ && !t.stale) {
          t.stale = true;
          went_stale.push_back(farm);
        }
        continue;
      }
      t.misses = 0;
      t.stale = false;
      if (t.last && now > t.last->first) {
        // A counter that went backwards was restarted; count from zero.
        const auto events = *v >= t.last->second ? *v - t.last->second : *v;
        t.points.push_back({t.last->first, now, events});
      }
      if (!t.last || now > t.last->first) t.last = {now, *v};
    }
  }
  for (const auto& farm : went_stale)
    if (alerts_)
      alerts_->raise(Severity::warning, "metrics:" + farm,
                     fmt::format("{} counters unreachable for {} samples", farm, miss_threshold_), "metrics-stale-" + farm);
}

std::vector<RatePoint> MetricsCollector::rate_series(const std::string& farm, double from, double to) const {
  std::lock_guard lock(mu_);
  auto it = tracks_.find(farm);
  if (it == tracks_.end()) throw NotFoundError(fmt::format("no metrics for farm '{}'", farm));
  std::vector<RatePoint> out;
  for (const auto& p : it->second.points)
    if (p.t1 >= from && p.t0 <= to) out.push_back(p);
  return out;
}

std::uint64_t MetricsCollector::total(const std::string& farm) const {
  std::uint64_t sum = 0;
  for (const auto& p : rate_series(farm)) sum += p.events;
  return sum;
}

bool MetricsCollector::stale(const std::string& farm) const {
  std::lock_guard lock(mu_);
  auto it = tracks_.find(farm);
  if (it == tracks_.end()) throw NotFoundError(fmt::format("no metrics for farm '{}'", farm));
  return it->second.stale;
}

std::vector<std::string> MetricsCollector::farms() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [f, t] : tracks_) out.push_back(f);
  return out;
}

double MetricsCollector::latest_rate(const std::string& farm) const {
  const auto s = rate_series(farm);
  return s.empty() ? 0.0 : s.back().rate();
}

nlohmann::json MetricsCollector::to_json() const {
  nlohmann::json out = nlohmann::json::object();
  std::lock_guard lock(mu_);
  for (const auto& [farm, t] : tracks_) {
    std::uint64_t total = 0;
    for (const auto& p : t.points) total += p.events;
    out[farm] = {{"total", total},
                 {"stale", t.stale},
                 {"rate", t.points.empty() ? 0.0 : t.points.back().rate()},
                 {"samples", t.points.size()}};
  }
  return out;
}

void MetricsCollector::start(double period_s) {
  stop();
  stop_ = false;
  thread_ = std::thread([this, period_s] {
    std::unique_lock lock(mu_);
    while (!stop_) {
      lock.unlock();
      collect();
      lock.lock();
      cv_.wait_for(lock, std::chrono::duration<double>(period_s), [this] { return stop_; });
    }
  });
}

void MetricsCollector::stop() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

// -- orchestrator ----------------------------------------------------------------

void FarmSpec::validate() const {
  if (id.empty()) throw ConfigError("farm id is empty");
  if (workers < 1) throw ConfigError(fmt::format("farm {} needs at least one worker", id));
}

std::string er_federation(const std::string& farm) { return "ER-" + farm; }

nlohmann::json LogEntry::to_json() const {
  nlohmann::json j = {{"seq", seq}, {"time", time}, {"run", run.value()}};
  if (kind == fanout) {
    j["kind"] = "fanout";
    j["federation"] = federation;
    j["digest"] = digest;
  } else {
    j["kind"] = "transition";
    j["from"] = to_string(from);
    j["to"] = to_string(to);
    j["farm"] = farm;
    j["detail"] = detail;
    if (calib) j["calib"] = calib->value();
  }
  return j;
}

LogEntry LogEntry::from_json(const nlohmann::json& j) {
  LogEntry e;
  e.seq = j.at("seq");
  e.time = j.at("time");
  e.run = RunId(j.at("run").get<std::uint32_t>());
  if (j.at("kind") == "fanout") {
    e.kind = fanout;
    e.federation = j.at("federation");
    e.digest = j.at("digest");
  } else {
    e.kind = transition;
    e.from = phase_from_string(j.at("from").get<std::string>());
    e.to = phase_from_string(j.at("to").get<std::string>());
    e.farm = j.value("farm", "");
    e.detail = j.value("detail", "");
    if (j.contains("calib")) e.calib = RunId(j.at("calib").get<std::uint32_t>());
  }
  return e;
}

nlohmann::json RunView::to_json() const {
  nlohmann::json j = {{"run", run.value()}, {"phase", to_string(phase)}, {"reason", reason},
                      {"farm", farm},       {"xtc", xtc.string()},     {"entered", entered}};
  j["held_from"] = held_from ? nlohmann::json(to_string(*held_from)) : nlohmann::json();
  j["attempt"] = attempt ? nlohmann::json(*attempt) : nlohmann::json();
  return j;
}

nlohmann::json FarmView::to_json() const {
  return {{"id", spec.id},
          {"kind", spec.kind == FarmKind::PC ? "PC" : "ER"},
          {"workers", spec.workers},
          {"endpoints", spec.endpoints},
          {"busy", busy ? nlohmann::json(busy->value()) : nlohmann::json()},
          {"paused", paused},
          {"available_at", available_at},
          {"completed", completed}};
}

Orchestrator::Orchestrator(std::vector<FarmSpec> farms, ConditionsStore& conditions, Bookkeeping& bookkeeping,
                           AlertBook& alerts, ControlOptions opts, Clock clock, FileCheck file_exists)
    : conditions_(conditions),
      bookkeeping_(bookkeeping),
      alerts_(alerts),
      opts_(std::move(opts)),
      clock_(clock ? std::move(clock) : Clock(wall_now)),
      file_exists_(file_exists ? std::move(file_exists)
                               : FileCheck([](const std::filesystem::path& p) { return std::filesystem::exists(p); })) {
  std::set<std::string> ids;
  for (auto& f : farms) {
    f.validate();
    if (!ids.insert(f.id).second) throw ConfigError(fmt::format("duplicate farm id '{}'", f.id));
    FarmRec r;
    r.view.spec = std::move(f);
    farms_.push_back(std::move(r));
  }
  if (opts_.log) {
    log_out_.open(*opts_.log, std::ios::app);
    if (!log_out_) throw ConfigError(fmt::format("cannot open control log {}", opts_.log->string()));
  }
}

Orchestrator::RunRec& Orchestrator::find_run_locked(RunId run) {
  auto it = runs_.find(run.value());
  if (it == runs_.end()) throw NotFoundError(fmt::format("run {} is not known", run.str()));
  return it->second;
}

Orchestrator::FarmRec& Orchestrator::find_farm_locked(const std::string& id) {
  for (auto& f : farms_)
    if (f.view.spec.id == id) return f;
  throw NotFoundError(fmt::format("farm '{}' is not known", id));
}

void Orchestrator::append_locked(LogEntry e) {
  e.seq = log_.size() + 1;
  e.time = clock_();
  if (log_out_.is_open()) {
    log_out_ << e.to_json().dump() << '\n';
    log_out_.flush();
  }
  log_.push_back(std::move(e));
}

void Orchestrator::move_locked(RunRec& r, Phase to, std::string detail, std::optional<RunId> calib) {
  const Phase from = r.view.phase;
  const bool ok = from == Phase::held ? r.view.held_from == to : transition_allowed(from, to);
  if (!ok)
    throw ConflictError(fmt::format("run {} cannot go from {} to {}", r.view.run.str(), to_string(from), to_string(to)));
  LogEntry e;
  e.run = r.view.run;
  e.from = from;
  e.to = to;
  e.farm = r.view.farm;
  e.detail = detail;
  e.calib = calib;
  append_locked(std::move(e));
  if (to == Phase::held) r.view.held_from = from;
  if (from == Phase::held) r.view.held_from.reset();
  r.view.phase = to;
  r.view.entered[std::string(to_string(to))] = log_.back().time;
  if (to == Phase::failed) r.view.reason = std::move(detail);
  else if (to != Phase::held) r.view.reason.clear();
}

void Orchestrator::fail_locked(RunRec& r, const std::string& where, const std::string& reason) {
  move_locked(r, Phase::failed, fmt::format("{}: {}", where, reason));
  alerts_.raise(Severity::critical, "control", fmt::format("run {} failed in {}: {}", r.view.run.str(), where, reason),
                fmt::format("run-failed-{}-{}", r.view.run.value(), where));
}

bool Orchestrator::farm_ready_locked(const FarmRec& f, double now) const {
  return !f.view.busy && !f.view.paused && f.view.available_at <= now;
}

RunView Orchestrator::submit_run(RunId run, std::filesystem::path xtc) {
  std::lock_guard lock(mu_);
  auto it = runs_.find(run.value());
  if (it == runs_.end()) {
    if (pc_high_water_ && run < *pc_high_water_)
      throw ConflictError(fmt::format("run {} arrived after PC reached run {}; runs must be calibrated in order",
                                      run.str(), pc_high_water_->str()));
    RunRec r;
    r.view.run = run;
    r.view.xtc = std::move(xtc);
    LogEntry e;
    e.run = run;
    e.detail = "submitted";
    append_locked(std::move(e));
    r.view.entered["queued"] = log_.back().time;
    return runs_.emplace(run.value(), std::move(r)).first->second.view;
  }
  auto& r = it->second;
  if (r.view.phase != Phase::done && r.view.phase != Phase::failed)
    throw ConflictError(fmt::format("run {} is already active ({})", run.str(), to_string(r.view.phase)));
  r.view.xtc = std::move(xtc);
  r.view.farm.clear();
  r.view.attempt.reset();
  if (conditions_.entry_bytes(kPcFederation, run)) {
    // Reprocessing: the run's own calibration exists, so only ER is repeated.
    move_locked(r, Phase::er_dispatchable, "resubmitted for reprocessing");
  } else if (!pc_high_water_ || run > *pc_high_water_ ||
             (run == *pc_high_water_ && r.view.phase == Phase::failed)) {
    move_locked(r, Phase::queued, "resubmitted");
  } else {
    throw ConflictError(fmt::format("run {} has no calibration and PC has moved past it", run.str()));
  }
  return r.view;
}

std::optional<PcAssignment> Orchestrator::dispatch_pc() {
  std::lock_guard lock(mu_);
  const double now = clock_();
  FarmRec* farm = nullptr;
  for (auto& f : farms_)
    if (f.view.spec.kind == FarmKind::PC && farm_ready_locked(f, now)) {
      farm = &f;
      break;
    }
  if (!farm) return std::nullopt;
  // Calibrations must be published in run order, so one PC run is in flight at a time.
  for (const auto& [value, r] : runs_)
    if (r.view.phase == Phase::pc_running || r.view.phase == Phase::staging) return std::nullopt;
  for (auto& [value, r] : runs_) {
    const auto p = r.view.phase;
    if (p == Phase::held) continue;
    if (p == Phase::failed) {
      // A PC failure, or a failure before PC, blocks every later run.
      if (conditions_.entry_bytes(kPcFederation, r.view.run)) continue;
      if (pc_high_water_ && r.view.run < *pc_high_water_) continue;  // PC already moved past it
      alerts_.raise(Severity::critical, "control",
                    fmt::format("PC queue stalled at failed run {}; hold it to continue", r.view.run.str()),
                    fmt::format("pc-stall-{}", value));
      return std::nullopt;
    }
    if (p != Phase::queued) continue;
    move_locked(r, Phase::staging);
    if (!file_exists_(r.view.xtc)) {
      fail_locked(r, "staging", fmt::format("XTC file {} is missing", r.view.xtc.string()));
      return std::nullopt;
    }
    r.view.farm = farm->view.spec.id;
    const auto attempt = bookkeeping_.open_attempt(r.view.run, Pass::PC, opts_.release, farm->view.spec.id);
    r.view.attempt = attempt.id;
    move_locked(r, Phase::pc_running);
    pc_high_water_ = r.view.run;
    farm->view.busy = r.view.run;
    return PcAssignment{r.view.run, farm->view.spec.id, r.view.xtc, attempt.id};
  }
  return std::nullopt;
}

void Orchestrator::fanout_locked(RunId validity) {
  const std::array<RunId, 1> one = {validity};
  const auto source = conditions_.entry_bytes(kPcFederation, validity);
  for (const auto& f : farms_) {
    if (f.view.spec.kind != FarmKind::ER) continue;
    const auto fed = er_federation(f.view.spec.id);
    transfer_conditions(conditions_, kPcFederation, conditions_, fed, one);
    const auto copied = conditions_.entry_bytes(fed, validity);
    if (!copied || copied != source) throw ConditionsError(fmt::format("fan-out to {} did not match the source", fed));
    LogEntry e;
    e.kind = LogEntry::fanout;
    e.run = validity;
    e.federation = fed;
    e.digest = to_hex(digest_bytes(as_bytes(*copied)));
    append_locked(std::move(e));
  }
}

void Orchestrator::seed_calibration(const RollingCalibration& cal) {
  std::lock_guard lock(mu_);
  for (const auto& [v, r] : runs_)
    if (r.view.run <= cal.validity_start)
      throw ConflictError(fmt::format("seed calibration at {} would cover submitted run {}", cal.validity_start.str(),
                                      r.view.run.str()));
  conditions_.publish(kPcFederation, cal);
  fanout_locked(cal.validity_start);
}

void Orchestrator::on_pc_complete(RunId run, const RollingCalibration& cal) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  if (r.view.phase != Phase::pc_running)
    throw ConflictError(fmt::format("run {} is not in PC ({})", run.str(), to_string(r.view.phase)));
  auto& farm = find_farm_locked(r.view.farm);
  farm.view.busy.reset();
  ++farm.view.completed;
  farm.view.available_at = clock_() + opts_.pc_deadtime_s;
  const auto attempt = r.view.attempt;
  auto close = [&](AttemptStatus s) {
    if (attempt) bookkeeping_.close_attempt(*attempt, s);
  };
  try {
    if (cal.validity_start != run)
      throw ConditionsError(fmt::format("calibration validity {} does not start at run {}", cal.validity_start.str(),
                                        run.str()));
    conditions_.publish(kPcFederation, cal);
  } catch (const Error& e) {
    close(AttemptStatus::failed);
    fail_locked(r, "conditions", e.what());
    return;
  }
  close(AttemptStatus::done);
  move_locked(r, Phase::conditions_ready, cal.version);
  try {
    fanout_locked(run);
  } catch (const Error& e) {
    fail_locked(r, "conditions", e.what());
    return;
  }
  r.view.farm.clear();
  move_locked(r, Phase::er_dispatchable);
}

void Orchestrator::on_pc_failed(RunId run, const std::string& reason) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  if (r.view.phase != Phase::pc_running)
    throw ConflictError(fmt::format("run {} is not in PC ({})", run.str(), to_string(r.view.phase)));
  auto& farm = find_farm_locked(r.view.farm);
  farm.view.busy.reset();
  if (r.view.attempt) bookkeeping_.close_attempt(*r.view.attempt, AttemptStatus::failed);
  fail_locked(r, "pc", reason);
}

std::vector<ErAssignment> Orchestrator::dispatch_er() {
  std::lock_guard lock(mu_);
  const double now = clock_();
  std::vector<ErAssignment> out;
  for (auto& [value, r] : runs_) {
    if (r.view.phase != Phase::er_dispatchable) continue;
    std::vector<FarmRec*> candidates;
    for (auto& f : farms_)
      if (f.view.spec.kind == FarmKind::ER && farm_ready_locked(f, now)) candidates.push_back(&f);
    // Every candidate is idle, so the pending count ties; spread by completed runs.
    std::sort(candidates.begin(), candidates.end(), [](const FarmRec* a, const FarmRec* b) {
      return std::tie(a->view.completed, a->view.spec.id) < std::tie(b->view.completed, b->view.spec.id);
    });
    // The farm must already hold the calibration the PC federation would give this run.
    RollingCalibration expected;
    try {
      expected = conditions_.lookup(kPcFederation, r.view.run, opts_.mode);
    } catch (const ConditionsMissing&) {
      continue;
    }
    for (auto* f : candidates) {
      RollingCalibration cal;
      try {
        cal = conditions_.lookup(er_federation(f->view.spec.id), r.view.run, opts_.mode);
      } catch (const ConditionsMissing&) {
        continue;
      }
      if (cal.validity_start != expected.validity_start || cal.version != expected.version) continue;
      const auto attempt =
          bookkeeping_.open_attempt(r.view.run, Pass::ER, opts_.release, f->view.spec.id, cal.version);
      r.view.farm = f->view.spec.id;
      r.view.attempt = attempt.id;
      move_locked(r, Phase::er_running, cal.version, cal.validity_start);
      f->view.busy = r.view.run;
      out.push_back({r.view.run, f->view.spec.id, r.view.xtc, attempt.id, attempt.version, cal.version,
                     cal.validity_start});
      break;
    }
  }
  return out;
}

void Orchestrator::on_er_complete(RunId run, const AttemptCounters& counters) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  if (r.view.phase != Phase::er_running)
    throw ConflictError(fmt::format("run {} is not in ER ({})", run.str(), to_string(r.view.phase)));
  auto& farm = find_farm_locked(r.view.farm);
  farm.view.busy.reset();
  ++farm.view.completed;
  farm.view.available_at = clock_() + opts_.er_deadtime_s;
  try {
    if (r.view.attempt) bookkeeping_.close_attempt(*r.view.attempt, AttemptStatus::done, counters);
  } catch (const BookkeepingError& e) {
    bookkeeping_.close_attempt(*r.view.attempt, AttemptStatus::failed, counters);
    fail_locked(r, "er", e.what());
    return;
  }
  move_locked(r, Phase::done);
}

void Orchestrator::on_er_failed(RunId run, const std::string& reason, const AttemptCounters& counters) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  if (r.view.phase != Phase::er_running)
    throw ConflictError(fmt::format("run {} is not in ER ({})", run.str(), to_string(r.view.phase)));
  auto& farm = find_farm_locked(r.view.farm);
  farm.view.busy.reset();
  farm.view.available_at = clock_() + opts_.er_deadtime_s;
  if (r.view.attempt) bookkeeping_.close_attempt(*r.view.attempt, AttemptStatus::failed, counters);
  fail_locked(r, "er", reason);
}

void Orchestrator::record_qa(const QaReport& report) {
  std::optional<std::uint64_t> attempt;
  {
    std::lock_guard lock(mu_);
    qa_[report.run.value()] = report;
    auto it = runs_.find(report.run.value());
    if (it != runs_.end()) attempt = it->second.view.attempt;
  }
  if (report.passed()) return;
  std::string why;
  for (const auto& f : report.failures) why += (why.empty() ? "" : "; ") + f;
  alerts_.raise(Severity::warning, "qa", fmt::format("run {} failed QA: {}", report.run.str(), why),
                fmt::format("qa-{}", report.run.value()));
  if (attempt) bookkeeping_.mark_suspect(*attempt, "qa: " + why);
}

void Orchestrator::hold(RunId run) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  const auto p = r.view.phase;
  if (p != Phase::queued && p != Phase::failed && p != Phase::er_dispatchable)
    throw ConflictError(fmt::format("run {} cannot be held while {}", run.str(), to_string(p)));
  move_locked(r, Phase::held, "operator hold");
}

void Orchestrator::release(RunId run) {
  std::lock_guard lock(mu_);
  auto& r = find_run_locked(run);
  if (r.view.phase != Phase::held) throw ConflictError(fmt::format("run {} is not held", run.str()));
  if (r.view.held_from == Phase::queued && pc_high_water_ && run < *pc_high_water_)
    throw ConflictError(fmt::format("PC has passed run {}; releasing it would break run order", run.str()));
  move_locked(r, *r.view.held_from, "operator release");
}

void Orchestrator::pause_farm(const std::string& farm) {
  std::lock_guard lock(mu_);
  find_farm_locked(farm).view.paused = true;
}

void Orchestrator::resume_farm(const std::string& farm) {
  std::lock_guard lock(mu_);
  find_farm_locked(farm).view.paused = false;
}

bool Orchestrator::idle() const {
  std::lock_guard lock(mu_);
  for (const auto& [v, r] : runs_)
    if (r.view.phase == Phase::pc_running || r.view.phase == Phase::er_running) return false;
  return true;
}

bool Orchestrator::all_done() const {
  std::lock_guard lock(mu_);
  for (const auto& [v, r] : runs_)
    if (r.view.phase != Phase::done) return false;
  return true;
}

std::optional<double> Orchestrator::next_available() const {
  std::lock_guard lock(mu_);
  const double now = clock_();
  std::optional<double> best;
  for (const auto& f : farms_)
    if (f.view.available_at > now && (!best || f.view.available_at < *best)) best = f.view.available_at;
  return best;
}

RunView Orchestrator::run(RunId run) const {
  std::lock_guard lock(mu_);
  return const_cast<Orchestrator*>(this)->find_run_locked(run).view;
}

std::vector<RunView> Orchestrator::runs() const {
  std::lock_guard lock(mu_);
  std::vector<RunView> out;
  for (const auto& [v, r] : runs_) out.push_back(r.view);
  return out;
}

std::vector<FarmView> Orchestrator::farms() const {
  std::lock_guard lock(mu_);
  std::vector<FarmView> out;
  for (const auto& f : farms_) out.push_back(f.view);
  return out;
}

std::optional<QaReport> Orchestrator::qa(RunId run) const {
  std::lock_guard lock(mu_);
  auto it = qa_.find(run.value());
  if (it == qa_.end()) return std::nullopt;
  return it->second;
}

std::vector<LogEntry> Orchestrator::log() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::optional<RunId> Orchestrator::pc_high_water() const {
  std::lock_guard lock(mu_);
  return pc_high_water_;
}

nlohmann::json Orchestrator::status_json() const {
  std::lock_guard lock(mu_);
  nlohmann::json farms = nlohmann::json::array();
  for (const auto& f : farms_) farms.push_back(f.view.to_json());
  nlohmann::json runs = nlohmann::json::array();
  std::map<std::string, int> counts;
  for (const auto& k : kPhaseNames) counts[std::string(k)] = 0;
  for (const auto& [v, r] : runs_) {
    runs.push_back(r.view.to_json());
    ++counts[std::string(to_string(r.view.phase))];
  }
  return {{"time", clock_()},
          {"mode", opts_.mode == LookupMode::two_pass ? "two_pass" : "one_pass"},
          {"release", opts_.release},
          {"pc_high_water", pc_high_water_ ? nlohmann::json(pc_high_water_->value()) : nlohmann::json()},
          {"farms", farms},
          {"runs", runs},
          {"phase_counts", counts}};
}

// -- audit -----------------------------------------------------------------------

ControlAudit audit_control_log(const std::vector<LogEntry>& log, LookupMode mode, const std::set<std::string>& er_farms) {
  ControlAudit a;
  auto bad = [&](const LogEntry& e, const std::string& what) {
    a.violations.push_back(fmt::format("seq {} run {}: {}", e.seq, e.run.str(), what));
  };
  struct State {
    Phase phase;
    std::optional<Phase> held_from;
  };
  std::map<std::uint32_t, State> runs;
  std::map<std::string, std::map<std::uint32_t, std::string>> fanned;  // federation -> validity -> digest
  std::map<std::uint32_t, std::string> digest_of;
  std::optional<std::uint32_t> last_pc;
  bool last_pc_failed = false;  // a failed PC run may be restarted before any other
  std::uint64_t last_seq = 0;
  double last_time = -std::numeric_limits<double>::infinity();

  for (const auto& e : log) {
    if (e.seq <= last_seq) bad(e, "sequence numbers not increasing");
    if (e.time < last_time) bad(e, "time went backwards");
    last_seq = e.seq;
    last_time = e.time;
    const auto n = e.run.value();

    if (e.kind == LogEntry::fanout) {
      ++a.fanouts;
      fanned[e.federation][n] = e.digest;
      auto [it, fresh] = digest_of.emplace(n, e.digest);
      if (!fresh && it->second != e.digest) bad(e, fmt::format("fan-out to {} differs from other federations", e.federation));
      continue;
    }

    auto it = runs.find(n);
    if (it == runs.end()) {
      if (e.from != Phase::queued || e.to != Phase::queued) bad(e, "first entry is not a submission");
      runs[n] = {Phase::queued, std::nullopt};
      continue;
    }
    auto& st = it->second;
    if (st.phase != e.from)
      bad(e, fmt::format("log says from {} but run was {}", to_string(e.from), to_string(st.phase)));
    if (e.from == Phase::held) {
      if (!st.held_from || *st.held_from != e.to) bad(e, fmt::format("release to {} is not where it was held", to_string(e.to)));
    } else if (!transition_allowed(e.from, e.to)) {
      bad(e, fmt::format("edge {} -> {} is not in the phase graph", to_string(e.from), to_string(e.to)));
    }

    if (e.to == Phase::pc_running) {
      ++a.pc_starts;
      const bool retry = last_pc && n == *last_pc && last_pc_failed;
      if (last_pc && n <= *last_pc && !retry) bad(e, fmt::format("PC start after run {}", *last_pc));
      last_pc = n;
      last_pc_failed = false;
      for (const auto& [m, s] : runs)
        if (m < n && (s.phase == Phase::queued || s.phase == Phase::staging))
          bad(e, fmt::format("PC started while lower run {} was still {}", m, to_string(s.phase)));
    }
    if (e.to == Phase::er_running) {
      ++a.er_starts;
      if (!er_farms.count(e.farm)) bad(e, fmt::format("ER start on unknown farm '{}'", e.farm));
      const std::uint32_t bound = mode == LookupMode::two_pass ? n : n - 1;
      std::optional<std::uint32_t> newest;
      const auto fit = fanned.find(er_federation(e.farm));
      if (fit != fanned.end())
        for (const auto& [v, d] : fit->second)
          if (v <= bound) newest = v;
      if (!e.calib) bad(e, "ER start without a calibration");
      else if (!newest) bad(e, fmt::format("ER start on {} before any covering calibration reached it", e.farm));
      else if (e.calib->value() != *newest)
        bad(e, fmt::format("ER used calibration {} but newest covering fan-out to {} was {}", e.calib->value(), e.farm,
                           *newest));
    }
    if (last_pc && n == *last_pc && e.to == Phase::failed &&
        (e.from == Phase::pc_running || e.from == Phase::staging))
      last_pc_failed = true;
    if (e.to == Phase::held) st.held_from = e.from;
    if (e.from == Phase::held) st.held_from.reset();
    st.phase = e.to;
  }
  return a;
}

std::vector<LogEntry> read_control_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read control log {}", path.string()));
  std::vector<LogEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(LogEntry::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception&) {
      if (in.peek() == EOF) break;  // torn final line
      throw;
    }
  }
  return out;
}

}  // namespace promptreco
