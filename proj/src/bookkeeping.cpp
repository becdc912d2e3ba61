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

#include "promptreco/bookkeeping.hpp"

#include <chrono>

#include <fmt/format.h>

namespace promptreco {

std::string_view to_string(Pass p) { return p == Pass::PC ? "PC" : "ER"; }

std::string_view to_string(AttemptStatus s) {
  switch (s) {
    case AttemptStatus::running: return "running";
    case AttemptStatus::done: return "done";
    case AttemptStatus::failed: return "failed";
    case AttemptStatus::aborted: return "aborted";
  }
  return "?";
}

Pass pass_from_string(std::string_view s) {
  if (s == "PC") return Pass::PC;
  if (s == "ER") return Pass::ER;
  throw BookkeepingError(fmt::format("unknown pass '{}'", s));
}

AttemptStatus attempt_status_from_string(std::string_view s) {
  for (auto st : {AttemptStatus::running, AttemptStatus::done, AttemptStatus::failed, AttemptStatus::aborted})
    if (to_string(st) == s) return st;
  throw BookkeepingError(fmt::format("unknown attempt status '{}'", s));
}

namespace {

nlohmann::json counters_json(const AttemptCounters& c) {
  return {{"read", c.read},
          {"filtered", c.filtered},
          {"committed", c.committed},
          {"killer", c.killer},
          {"redelivered", c.redelivered}};
}

AttemptCounters counters_from(const nlohmann::json& j) {
  AttemptCounters c;
  c.read = j.at("read");
  c.filtered = j.at("filtered");
  c.committed = j.at("committed");
  c.killer = j.at("killer");
  c.redelivered = j.at("redelivered");
  return c;
}

double wall_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

}  // namespace

nlohmann::json to_json(const ProcessingAttempt& a) {
  nlohmann::json j = {
      {"id", a.id},
      {"run", a.run.value()},
      {"pass", to_string(a.pass)},
      {"version", a.version},
      {"release", a.release},
      {"farm", a.farm},
      {"calib_version", a.calib_version ? nlohmann::json(*a.calib_version) : nlohmann::json()},
      {"start", a.start},
      {"end", a.end ? nlohmann::json(*a.end) : nlohmann::json()},
      {"counters", counters_json(a.counters)},
      {"status", to_string(a.status)},
      {"suspect", a.suspect},
  };
  return j;
}

ProcessingAttempt attempt_from_json(const nlohmann::json& j) {
  ProcessingAttempt a;
  a.id = j.at("id");
  a.run = RunId(j.at("run").get<std::uint32_t>());
  a.pass = pass_from_string(j.at("pass").get<std::string>());
  a.version = j.at("version");
  a.release = j.at("release");
  a.farm = j.at("farm");
  if (!j.at("calib_version").is_null()) a.calib_version = j.at("calib_version").get<std::string>();
  a.start = j.at("start");
  if (!j.at("end").is_null()) a.end = j.at("end").get<double>();
  a.counters = counters_from(j.at("counters"));
  a.status = attempt_status_from_string(j.at("status").get<std::string>());
  a.suspect = j.value("suspect", std::vector<std::string>{});
  return a;
}

Bookkeeping::Bookkeeping(std::optional<std::filesystem::path> log, Clock clock)
    : path_(std::move(log)), clock_(clock ? std::move(clock) : Clock(wall_now)) {
  if (!path_) return;
  if (std::filesystem::exists(*path_)) {
    std::ifstream in(*path_);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (line.empty()) continue;
      try {
        apply(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw BookkeepingError(fmt::format("{}:{}: {}", path_->string(), line_no, e.what()));
      }
    }
  }
  if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
  out_.open(*path_, std::ios::app);
  if (!out_) throw BookkeepingError(fmt::format("cannot append to {}", path_->string()));
}

void Bookkeeping::append(const nlohmann::json& rec) {
  if (!out_.is_open()) return;
  out_ << rec.dump() << '\n';
  out_.flush();
  if (!out_) throw BookkeepingError("bookkeeping log write failed");
}

// Applies one log record. Validation happens before the record is written,
// so replay trusts the log.
void Bookkeeping::apply(const nlohmann::json& rec) {
  const auto op = rec.at("op").get<std::string>();
  if (op == "open") {
    auto a = attempt_from_json(rec.at("attempt"));
    by_run_[{a.run.value(), a.pass}].push_back(a.id);
    next_id_ = std::max(next_id_, a.id + 1);
    attempts_[a.id] = std::move(a);
  } else if (op == "close") {
    auto& a = find_locked(rec.at("id"));
    a.status = attempt_status_from_string(rec.at("status").get<std::string>());
    a.counters = counters_from(rec.at("counters"));
    a.end = rec.at("end").get<double>();
  } else if (op == "suspect") {
    find_locked(rec.at("id")).suspect.push_back(rec.at("reason"));
  } else {
    throw BookkeepingError(fmt::format("unknown bookkeeping record '{}'", op));
  }
}

ProcessingAttempt& Bookkeeping::find_locked(std::uint64_t id) {
  auto it = attempts_.find(id);
  if (it == attempts_.end()) throw BookkeepingError(fmt::format("no attempt with id {}", id));
  return it->second;
}

ProcessingAttempt Bookkeeping::open_attempt(RunId run, Pass pass, std::string release, std::string farm,
                                            std::optional<std::string> calib_version) {
  std::lock_guard lock(mu_);
  const auto& prior = by_run_[{run.value(), pass}];
  for (auto id : prior)
    if (attempts_.at(id).status == AttemptStatus::running)
      throw ConflictError(fmt::format("run {} already has a running {} attempt (version {})", run.str(),
                                      to_string(pass), attempts_.at(id).version));
  ProcessingAttempt a;
  a.id = next_id_;
  a.run = run;
  a.pass = pass;
  a.version = static_cast<std::uint32_t>(prior.size());
  a.release = std::move(release);
  a.farm = std::move(farm);
  if (pass == Pass::ER) a.calib_version = std::move(calib_version);
  a.start = clock_();
  nlohmann::json rec = {{"op", "open"}, {"attempt", to_json(a)}};
  append(rec);
  apply(rec);
  return a;
}

ProcessingAttempt Bookkeeping::close_attempt(std::uint64_t id, AttemptStatus status, const AttemptCounters& counters) {
  std::lock_guard lock(mu_);
  auto& a = find_locked(id);
  if (a.terminal())
    throw BookkeepingError(fmt::format("attempt {} is already {} and cannot change", id, to_string(a.status)));
  if (status == AttemptStatus::running) throw BookkeepingError("closing requires a terminal status");
  if (status == AttemptStatus::done && a.pass == Pass::ER && !counters.balanced())
    throw BookkeepingError(fmt::format("inconsistent counters for attempt {}: read {} != committed {} + killer {} + filtered {}",
                                       id, counters.read, counters.committed, counters.killer, counters.filtered));
  const double end = std::max(clock_(), a.start);
  nlohmann::json rec = {
      {"op", "close"}, {"id", id}, {"status", to_string(status)}, {"counters", counters_json(counters)}, {"end", end}};
  append(rec);
  apply(rec);
  return a;
}

void Bookkeeping::mark_suspect(std::uint64_t id, std::string reason) {
  std::lock_guard lock(mu_);
  find_locked(id);
  nlohmann::json rec = {{"op", "suspect"}, {"id", id}, {"reason", std::move(reason)}};
  append(rec);
  apply(rec);
}

std::vector<ProcessingAttempt> Bookkeeping::history(RunId run) const {
  std::lock_guard lock(mu_);
  std::vector<ProcessingAttempt> out;
  for (const auto& [id, a] : attempts_)
    if (a.run == run) out.push_back(a);
  return out;
}

std::optional<ProcessingAttempt> Bookkeeping::latest_good(RunId run, Pass pass) const {
  std::lock_guard lock(mu_);
  auto it = by_run_.find({run.value(), pass});
  if (it == by_run_.end()) return std::nullopt;
  for (auto id = it->second.rbegin(); id != it->second.rend(); ++id)
    if (attempts_.at(*id).status == AttemptStatus::done) return attempts_.at(*id);
  return std::nullopt;
}

std::optional<ProcessingAttempt> Bookkeeping::running(RunId run, Pass pass) const {
  std::lock_guard lock(mu_);
  auto it = by_run_.find({run.value(), pass});
  if (it == by_run_.end()) return std::nullopt;
  for (auto id : it->second)
    if (attempts_.at(id).status == AttemptStatus::running) return attempts_.at(id);
  return std::nullopt;
}

std::optional<ProcessingAttempt> Bookkeeping::get(std::uint64_t id) const {
  std::lock_guard lock(mu_);
  auto it = attempts_.find(id);
  if (it == attempts_.end()) return std::nullopt;
  return it->second;
}

std::vector<ProcessingAttempt> Bookkeeping::all() const {
  std::lock_guard lock(mu_);
  std::vector<ProcessingAttempt> out;
  for (const auto& [id, a] : attempts_) out.push_back(a);
  return out;
}

void Bookkeeping::export_csv(std::ostream& out) const {
  out << "id,run,pass,version,release,farm,calib_version,start,end,status,read,filtered,committed,killer,"
         "redelivered,suspect\n";
  for (const auto& a : all()) {
    out << fmt::format("{},{},{},{},{},{},{},{:.6f},{},{},{},{},{},{},{},{}\n", a.id, a.run.value(), to_string(a.pass),
                       a.version, a.release, a.farm, a.calib_version.value_or(""), a.start,
                       a.end ? fmt::format("{:.6f}", *a.end) : "", to_string(a.status), a.counters.read,
                       a.counters.filtered, a.counters.committed, a.counters.killer, a.counters.redelivered,
                       a.suspect.empty() ? 0 : 1);
  }
}

std::vector<ProcessingAttempt> Bookkeeping::replay(const std::filesystem::path& log) {
  if (!std::filesystem::exists(log)) throw BookkeepingError(fmt::format("no bookkeeping log at {}", log.string()));
  Bookkeeping b;
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) b.apply(nlohmann::json::parse(line));
  return b.all();
}

}  // namespace promptreco
