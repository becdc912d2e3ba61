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

#include "promptreco/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "promptreco/evstore.hpp"

namespace fs = std::filesystem;

namespace promptreco {

// -- import ----------------------------------------------------------------------

std::string_view to_string(ImportStage s) {
  switch (s) {
    case ImportStage::pending: return "pending";
    case ImportStage::staging: return "staging";
    case ImportStage::transferring: return "transferring";
    case ImportStage::archiving: return "archiving";
    case ImportStage::done: return "done";
    case ImportStage::failed: return "failed";
  }
  return "?";
}

std::size_t ImportCaps::cap(ImportStage s) const {
  switch (s) {
    case ImportStage::staging: return staging;
    case ImportStage::transferring: return transferring;
    case ImportStage::archiving: return archiving;
    default: return std::numeric_limits<std::size_t>::max();
  }
}

std::size_t ImportState::occupancy(ImportStage s) const {
  return static_cast<std::size_t>(std::count_if(jobs.begin(), jobs.end(), [&](const ImportJob& j) { return j.state == s; }));
}

const ImportJob* ImportState::find(std::string_view file) const {
  for (const auto& j : jobs)
    if (j.file == file) return &j;
  return nullptr;
}

bool ImportState::quiescent() const {
  return std::all_of(jobs.begin(), jobs.end(), [](const ImportJob& j) {
    return j.state == ImportStage::done || (j.state == ImportStage::failed && j.permanent);
  });
}

nlohmann::json ImportState::to_json() const {
  nlohmann::json js = nlohmann::json::array();
  for (const auto& j : jobs) {
    js.push_back({
        {"file", j.file},
        {"state", to_string(j.state)},
        {"failed_from", j.failed_from ? nlohmann::json(to_string(*j.failed_from)) : nlohmann::json()},
        {"permanent", j.permanent},
        {"stage_complete", j.stage_complete},
        {"retries", j.retries},
        {"last_error", j.last_error},
        {"source_digest", j.source_digest},
        {"received_digest", j.received_digest},
        {"retry_at", j.retry_at},
        {"notified", j.notified},
        {"archive_path", j.archive_path},
    });
  }
  return {
      {"jobs", js},
      {"caps", {{"staging", caps.staging}, {"transferring", caps.transferring}, {"archiving", caps.archiving}}},
      {"retry_interval_s", retry_interval_s},
      {"max_retries", max_retries},
      {"now", now},
      {"ignored_events", ignored_events},
  };
}

namespace {

constexpr std::string_view kImportKinds[] = {"submit", "clock", "staged", "transferred", "archived", "error"};

}  // namespace

nlohmann::json ImportEvent::to_json() const {
  return {{"kind", kImportKinds[kind]}, {"file", file}, {"time", time}, {"digest", digest}, {"detail", detail}};
}

ImportEvent ImportEvent::from_json(const nlohmann::json& j) {
  ImportEvent e;
  const auto k = j.at("kind").get<std::string>();
  auto it = std::find(std::begin(kImportKinds), std::end(kImportKinds), k);
  if (it == std::end(kImportKinds)) throw DecodeError(fmt::format("unknown import event '{}'", k));
  e.kind = static_cast<Kind>(it - std::begin(kImportKinds));
  e.file = j.at("file");
  e.time = j.at("time");
  e.digest = j.at("digest");
  e.detail = j.at("detail");
  return e;
}

bool verify_import(const ImportJob& job) {
  return !job.received_digest.empty() && job.received_digest == job.source_digest;
}

namespace {

ImportAction::Kind action_for(ImportStage s) {
  switch (s) {
    case ImportStage::staging: return ImportAction::stage;
    case ImportStage::transferring: return ImportAction::transfer;
    default: return ImportAction::archive;
  }
}

void advance(ImportState& s, std::vector<ImportAction>& out) {
  auto room = [&](ImportStage st) { return s.occupancy(st) < s.caps.cap(st); };
  auto enter = [&](ImportJob& j, ImportStage st) {
    j.state = st;
    j.stage_complete = false;
    out.push_back({action_for(st), j.file, {}});
  };
  // Downstream first, so slots freed this tick are refilled in pipeline order.
  for (auto& j : s.jobs)
    if (j.state == ImportStage::transferring && j.stage_complete && room(ImportStage::archiving))
      enter(j, ImportStage::archiving);
  for (auto& j : s.jobs)
    if (j.state == ImportStage::staging && j.stage_complete && room(ImportStage::transferring))
      enter(j, ImportStage::transferring);
  for (auto& j : s.jobs) {
    if (j.state != ImportStage::failed || j.permanent || !j.failed_from || s.now < j.retry_at) continue;
    if (!room(*j.failed_from)) continue;
    auto st = *j.failed_from;
    j.failed_from.reset();
    enter(j, st);
  }
  for (auto& j : s.jobs)
    if (j.state == ImportStage::pending && room(ImportStage::staging)) enter(j, ImportStage::staging);
}

}  // namespace

std::pair<ImportState, std::vector<ImportAction>> import_tick(ImportState s, const ImportEvent& ev) {
  std::vector<ImportAction> out;
  s.now = std::max(s.now, ev.time);
  ImportJob* j = nullptr;
  for (auto& x : s.jobs)
    if (x.file == ev.file) j = &x;

  // An error, or a corrupt transfer, counts as one retry.
  auto setback = [&](ImportJob& job, std::string err, bool requeue) {
    ++job.retries;
    job.last_error = std::move(err);
    job.stage_complete = false;
    if (job.retries > s.max_retries) {
      job.failed_from = job.state;
      job.state = ImportStage::failed;
      job.permanent = true;
      if (!job.notified) {
        job.notified = true;
        out.push_back({ImportAction::notify, job.file,
                       fmt::format("import of {} failed after {} attempts: {}", job.file, job.retries, job.last_error)});
      }
    } else if (requeue) {
      job.state = ImportStage::pending;
      job.failed_from.reset();
    } else {
      job.failed_from = job.state;
      job.state = ImportStage::failed;
      job.retry_at = s.now + s.retry_interval_s;
    }
  };
  auto working_in = [&](ImportStage st) { return j && j->state == st && !j->stage_complete; };

  switch (ev.kind) {
    case ImportEvent::submit:
      if (j) {
        ++s.ignored_events;
      } else {
        ImportJob job;
        job.file = ev.file;
        job.source_digest = ev.digest;
        s.jobs.push_back(std::move(job));
      }
      break;
    case ImportEvent::clock: break;
    case ImportEvent::staged:
      if (working_in(ImportStage::staging)) j->stage_complete = true;
      else ++s.ignored_events;
      break;
    case ImportEvent::transferred:
      if (working_in(ImportStage::transferring)) {
        j->received_digest = ev.digest;
        if (verify_import(*j)) j->stage_complete = true;
        else setback(*j, "received digest does not match the source", true);
      } else {
        ++s.ignored_events;
      }
      break;
    case ImportEvent::archived:
      if (working_in(ImportStage::archiving)) {
        j->state = ImportStage::done;
        j->archive_path = ev.detail;
      } else {
        ++s.ignored_events;
      }
      break;
    case ImportEvent::error:
      if (working_in(ImportStage::staging) || working_in(ImportStage::transferring) || working_in(ImportStage::archiving))
        setback(*j, ev.detail, false);
      else ++s.ignored_events;
      break;
  }
  advance(s, out);
  return {std::move(s), std::move(out)};
}

ImportState replay_import(const std::vector<ImportEvent>& events, ImportState initial) {
  for (const auto& e : events) initial = import_tick(std::move(initial), e).first;
  return initial;
}

std::vector<ImportEvent> read_import_log(const fs::path& path) {
  std::vector<ImportEvent> out;
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot read import log {}", path.string()));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(ImportEvent::from_json(nlohmann::json::parse(line)));
  return out;
}

namespace {

void flip_middle_byte(const fs::path& p) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  const auto size = fs::file_size(p);
  if (size == 0) {
    f.put('\x5a');
    return;
  }
  f.seekg(static_cast<std::streamoff>(size / 2));
  char c = 0;
  f.get(c);
  f.seekp(static_cast<std::streamoff>(size / 2));
  f.put(static_cast<char>(c ^ 0x40));
}

void copy_over(const fs::path& from, const fs::path& to) {
  fs::create_directories(to.parent_path());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

}  // namespace

ImportReport run_import(const std::vector<std::string>& files, const ImportOptions& opts) {
  ImportReport rep;
  ImportState s;
  s.caps = opts.caps;
  s.retry_interval_s = opts.retry_interval_s;
  s.max_retries = opts.max_retries;
  std::mt19937_64 rng(opts.seed);
  std::vector<ImportAction> inflight;
  std::map<std::pair<std::string, int>, std::uint32_t> attempts;
  std::ofstream log;
  if (opts.event_log) log.open(*opts.event_log, std::ios::trunc);

  auto apply = [&](ImportEvent ev) {
    ev.time = std::max(ev.time, s.now);
    auto [next, actions] = import_tick(std::move(s), ev);
    s = std::move(next);
    if (log.is_open()) log << ev.to_json().dump() << '\n';
    rep.events.push_back(ev);
    rep.max_staging = std::max(rep.max_staging, s.occupancy(ImportStage::staging));
    rep.max_transferring = std::max(rep.max_transferring, s.occupancy(ImportStage::transferring));
    rep.max_archiving = std::max(rep.max_archiving, s.occupancy(ImportStage::archiving));
    for (auto& a : actions) {
      if (a.kind == ImportAction::notify) {
        spdlog::warn("import: {}", a.message);
        rep.notifications.push_back(a);
      } else {
        inflight.push_back(a);
      }
    }
    if (opts.on_tick) opts.on_tick(s);
  };

  for (const auto& f : files)
    apply({ImportEvent::submit, f, s.now, to_hex(file_digest(opts.source_dir / f)), {}});

  while (!s.quiescent()) {
    if (inflight.empty()) {
      double next = std::numeric_limits<double>::infinity();
      for (const auto& j : s.jobs)
        if (j.state == ImportStage::failed && !j.permanent) next = std::min(next, j.retry_at);
      if (!std::isfinite(next)) throw Error("import stalled with no work in flight and no retry due");
      apply({ImportEvent::clock, {}, next, {}, {}});
      continue;
    }
    const auto pick = static_cast<std::size_t>(rng() % inflight.size());
    const auto a = inflight[pick];
    inflight.erase(inflight.begin() + static_cast<std::ptrdiff_t>(pick));
    const auto attempt = ++attempts[{a.file, static_cast<int>(a.kind)}];
    const double t = s.now + opts.step_s;
    if (opts.fail) {
      if (auto err = opts.fail(a, attempt)) {
        apply({ImportEvent::error, a.file, t, {}, *err});
        continue;
      }
    }
    switch (a.kind) {
      case ImportAction::stage:
        copy_over(opts.source_dir / a.file, opts.staging_dir / a.file);
        apply({ImportEvent::staged, a.file, t, {}, {}});
        break;
      case ImportAction::transfer: {
        const auto dst = opts.dest_dir / a.file;
        copy_over(opts.staging_dir / a.file, dst);
        if (opts.corrupt && opts.corrupt(a.file, attempt)) {
          flip_middle_byte(dst);
          ++rep.corruptions_injected;
        }
        auto received = to_hex(file_digest(dst));
        if (received != s.find(a.file)->source_digest) ++rep.corruptions_caught;
        apply({ImportEvent::transferred, a.file, t, received, {}});
        break;
      }
      case ImportAction::archive: {
        const auto dst = opts.archive_dir / a.file;
        copy_over(opts.dest_dir / a.file, dst);
        apply({ImportEvent::archived, a.file, t, {}, dst.string()});
        break;
      }
      case ImportAction::notify: break;
    }
  }
  rep.final_state = s;
  return rep;
}

// -- export ----------------------------------------------------------------------

std::string_view to_string(ExportState s) {
  switch (s) {
    case ExportState::open: return "open";
    case ExportState::closed: return "closed";
    case ExportState::qa_pending: return "qa_pending";
    case ExportState::qa_passed: return "qa_passed";
    case ExportState::qa_failed: return "qa_failed";
    case ExportState::transferring: return "transferring";
    case ExportState::verified: return "verified";
  }
  return "?";
}

namespace {

ExportState export_state_from(std::string_view s) {
  for (auto st : {ExportState::open, ExportState::closed, ExportState::qa_pending, ExportState::qa_passed,
                  ExportState::qa_failed, ExportState::transferring, ExportState::verified})
    if (to_string(st) == s) return st;
  throw DecodeError(fmt::format("unknown export state '{}'", s));
}

}  // namespace

nlohmann::json StatusRow::to_json() const {
  return {{"seq", seq}, {"file", file}, {"from", from}, {"to", to}, {"detail", detail}};
}

StatusRow StatusRow::from_json(const nlohmann::json& j) {
  return {j.at("seq"), j.at("file"), j.at("from"), j.at("to"), j.at("detail")};
}

bool ExportCycle::finished() const {
  return std::all_of(files.begin(), files.end(), [](const auto& kv) {
    const auto& f = kv.second;
    return f.state == ExportState::verified || (f.state == ExportState::qa_failed && f.alerted);
  });
}

nlohmann::json ExportCycle::to_json() const {
  nlohmann::json fs_ = nlohmann::json::array();
  for (const auto& [name, f] : files)
    fs_.push_back({{"name", f.name},
                   {"state", to_string(f.state)},
                   {"recorded_digest", f.recorded_digest},
                   {"qa_error", f.qa_error},
                   {"transfers", f.transfers},
                   {"alerted", f.alerted}});
  return {{"id", id}, {"rows", rows}, {"files", fs_}};
}

namespace {

// The single place a file changes state; both the live step and replay use it.
void apply_row(ExportCycle& c, const StatusRow& r) {
  auto& f = c.files[r.file];
  f.name = r.file;
  const auto from = export_state_from(r.from);
  const auto to = export_state_from(r.to);
  if (to == ExportState::closed) f.recorded_digest = r.detail;
  if (to == ExportState::qa_failed && from != ExportState::qa_failed) f.qa_error = r.detail;
  if (to == ExportState::qa_failed && from == ExportState::qa_failed) f.alerted = true;
  if (to == ExportState::transferring) ++f.transfers;
  f.state = to;
  c.rows = r.seq;
}

}  // namespace

ExportStep export_cycle_step(ExportCycle cycle, const ExportEvent& ev) {
  ExportStep r;
  r.cycle = std::move(cycle);
  auto& c = r.cycle;
  auto move = [&](const std::string& file, ExportState to, std::string detail = {}) {
    StatusRow row{c.rows + 1, file, std::string(to_string(c.files.at(file).state)), std::string(to_string(to)),
                  std::move(detail)};
    apply_row(c, row);
    r.rows.push_back(std::move(row));
  };
  auto it = c.files.find(ev.file);
  if (ev.kind == ExportEvent::add) {
    if (it == c.files.end()) {
      c.files[ev.file].name = ev.file;
      r.actions.push_back({ExportAction::close, ev.file, {}});
    }
    return r;
  }
  if (it == c.files.end()) return r;
  const auto st = it->second.state;
  switch (ev.kind) {
    case ExportEvent::add: break;
    case ExportEvent::closed:
      if (st != ExportState::open) break;
      move(ev.file, ExportState::closed, ev.digest);
      move(ev.file, ExportState::qa_pending);
      r.actions.push_back({ExportAction::qa, ev.file, {}});
      break;
    case ExportEvent::qa_done:
      if (st != ExportState::qa_pending && st != ExportState::closed) break;
      if (st == ExportState::closed) move(ev.file, ExportState::qa_pending);
      if (ev.ok) {
        move(ev.file, ExportState::qa_passed);
        move(ev.file, ExportState::transferring);
        r.actions.push_back({ExportAction::transfer, ev.file, {}});
      } else {
        move(ev.file, ExportState::qa_failed, ev.detail);
        r.actions.push_back({ExportAction::alert, ev.file, ev.detail});
      }
      break;
    case ExportEvent::transferred:
      if (st == ExportState::qa_passed) move(ev.file, ExportState::transferring);
      if (c.files.at(ev.file).state == ExportState::transferring)
        r.actions.push_back({ExportAction::verify, ev.file, {}});
      break;
    case ExportEvent::verified:
      if (st != ExportState::transferring) break;
      if (ev.digest == it->second.recorded_digest) {
        move(ev.file, ExportState::verified);
      } else {
        move(ev.file, ExportState::transferring, "destination digest mismatch");
        r.actions.push_back({ExportAction::transfer, ev.file, {}});
      }
      break;
    case ExportEvent::alert_sent:
      if (st == ExportState::qa_failed && !it->second.alerted) move(ev.file, ExportState::qa_failed, "alert sent");
      break;
  }
  return r;
}

ExportCycle replay_export(std::string id, const std::vector<StatusRow>& rows) {
  ExportCycle c;
  c.id = std::move(id);
  for (const auto& r : rows) apply_row(c, r);
  return c;
}

std::vector<ExportAction> pending_export_actions(const ExportCycle& cycle) {
  std::vector<ExportAction> out;
  for (const auto& [name, f] : cycle.files) {
    switch (f.state) {
      case ExportState::open: out.push_back({ExportAction::close, name, {}}); break;
      case ExportState::closed:
      case ExportState::qa_pending: out.push_back({ExportAction::qa, name, {}}); break;
      case ExportState::qa_passed:
      case ExportState::transferring: out.push_back({ExportAction::transfer, name, {}}); break;
      case ExportState::qa_failed:
        if (!f.alerted) out.push_back({ExportAction::alert, name, f.qa_error});
        break;
      case ExportState::verified: break;
    }
  }
  return out;
}

std::vector<StatusRow> read_status_log(const fs::path& path) {
  std::vector<StatusRow> out;
  std::ifstream in(path);
  if (!in) return out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      out.push_back(StatusRow::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception&) {
      if (in.peek() != std::char_traits<char>::eof()) throw DecodeError(fmt::format("damaged status log {}", path.string()));
      spdlog::warn("export: dropping a torn final line of {}", path.string());
    }
  }
  return out;
}

ExportReport run_export(const std::vector<fs::path>& files, const ExportOptions& opts) {
  ExportReport rep;
  std::map<std::string, fs::path> by_name;
  for (const auto& p : files) by_name[p.filename().string()] = p;

  auto cycle = replay_export(opts.cycle_id, read_status_log(opts.status_log));
  std::deque<ExportAction> queue;
  for (auto& a : pending_export_actions(cycle)) queue.push_back(a);

  if (opts.status_log.has_parent_path()) fs::create_directories(opts.status_log.parent_path());
  std::ofstream log(opts.status_log, std::ios::app);
  if (!log) throw Error(fmt::format("cannot append to {}", opts.status_log.string()));

  auto step = [&](const ExportEvent& ev) {
    auto r = export_cycle_step(std::move(cycle), ev);
    cycle = std::move(r.cycle);
    // Rows reach the log before any action they lead to.
    std::string chunk;
    for (const auto& row : r.rows) chunk += row.to_json().dump() + '\n';
    log << chunk;
    log.flush();
    for (auto& a : r.actions) queue.push_back(std::move(a));
  };

  for (const auto& [name, p] : by_name) step({ExportEvent::add, name, true, {}, {}});
  std::map<std::string, std::uint32_t> transfer_attempts;

  while (!queue.empty()) {
    auto a = queue.front();
    queue.pop_front();
    if (opts.crash_before && opts.crash_before(a)) {
      rep.crashed = true;
      rep.cycle = cycle;
      return rep;
    }
    const auto& src = by_name.at(a.file);
    const auto dst = opts.dest_dir / a.file;
    switch (a.kind) {
      case ExportAction::close: step({ExportEvent::closed, a.file, true, to_hex(file_digest(src)), {}}); break;
      case ExportAction::qa: {
        std::string problem;
        if (to_hex(file_digest(src)) != cycle.files.at(a.file).recorded_digest) problem = "digest differs from the one recorded at close";
        auto scan = verify_database_file(src);
        if (!scan.ok()) problem += (problem.empty() ? "" : "; ") + scan.problems.front();
        step({ExportEvent::qa_done, a.file, problem.empty(), {}, problem});
        break;
      }
      case ExportAction::transfer: {
        const bool present = fs::exists(dst) && to_hex(file_digest(dst)) == cycle.files.at(a.file).recorded_digest;
        if (!present) {
          copy_over(src, dst);
          ++rep.copies;
          if (opts.corrupt_in_transit && opts.corrupt_in_transit(a.file, ++transfer_attempts[a.file])) flip_middle_byte(dst);
        }
        step({ExportEvent::transferred, a.file, true, {}, {}});
        break;
      }
      case ExportAction::verify: step({ExportEvent::verified, a.file, true, to_hex(file_digest(dst)), {}}); break;
      case ExportAction::alert:
        if (opts.alert)
          opts.alert(fmt::format("export:{}:{}", opts.cycle_id, a.file),
                     fmt::format("export {} quarantined {}: {}", opts.cycle_id, a.file, a.detail));
        ++rep.alerts;
        step({ExportEvent::alert_sent, a.file, true, {}, {}});
        break;
    }
  }
  rep.cycle = cycle;
  return rep;
}

}  // namespace promptreco
