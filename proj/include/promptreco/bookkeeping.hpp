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

// Record of every processing attempt of every run. The backing store is an
// append-only JSON-lines log; the in-memory indexes are derived from it and
// can be rebuilt by replaying it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/core.hpp"

namespace promptreco {

class BookkeepingError : public Error {
 public:
  using Error::Error;
};

enum class Pass : std::uint8_t { PC, ER };
enum class AttemptStatus : std::uint8_t { running, done, failed, aborted };

std::string_view to_string(Pass p);
std::string_view to_string(AttemptStatus s);
Pass pass_from_string(std::string_view s);
AttemptStatus attempt_status_from_string(std::string_view s);

struct AttemptCounters {
  std::uint64_t read = 0;
  std::uint64_t filtered = 0;
  std::uint64_t committed = 0;
  std::uint64_t killer = 0;
  std::uint64_t redelivered = 0;

  bool balanced() const { return read == committed + killer + filtered; }
  friend bool operator==(const AttemptCounters&, const AttemptCounters&) = default;
};

struct ProcessingAttempt {
  std::uint64_t id = 0;
  RunId run;
  Pass pass = Pass::ER;
  std::uint32_t version = 0;
  std::string release;
  std::string farm;
  std::optional<std::string> calib_version;  // ER only
  double start = 0;                          // seconds since the epoch
  std::optional<double> end;
  AttemptCounters counters;
  AttemptStatus status = AttemptStatus::running;
  /// QA annotations; they do not change the attempt itself.
  std::vector<std::string> suspect;

  bool terminal() const { return status != AttemptStatus::running; }
  friend bool operator==(const ProcessingAttempt&, const ProcessingAttempt&) = default;
};

nlohmann::json to_json(const ProcessingAttempt& a);
ProcessingAttempt attempt_from_json(const nlohmann::json& j);

class Bookkeeping {
 public:
  using Clock = std::function<double()>;

  /// In-memory only when `log` is empty. An existing log is replayed.
  explicit Bookkeeping(std::optional<std::filesystem::path> log = std::nullopt, Clock clock = {});

  ProcessingAttempt open_attempt(RunId run, Pass pass, std::string release, std::string farm,
                                 std::optional<std::string> calib_version = std::nullopt);
  ProcessingAttempt close_attempt(std::uint64_t id, AttemptStatus status, const AttemptCounters& counters = {});
  void mark_suspect(std::uint64_t id, std::string reason);

  std::vector<ProcessingAttempt> history(RunId run) const;
  std::optional<ProcessingAttempt> latest_good(RunId run, Pass pass) const;
  std::optional<ProcessingAttempt> running(RunId run, Pass pass) const;
  std::optional<ProcessingAttempt> get(std::uint64_t id) const;
  std::vector<ProcessingAttempt> all() const;

  void export_csv(std::ostream& out) const;

  /// Rebuilds the state from a log file without appending to it.
  static std::vector<ProcessingAttempt> replay(const std::filesystem::path& log);

 private:
  void apply(const nlohmann::json& rec);
  void append(const nlohmann::json& rec);
  ProcessingAttempt& find_locked(std::uint64_t id);

  std::optional<std::filesystem::path> path_;
  std::ofstream out_;
  Clock clock_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, ProcessingAttempt> attempts_;
  std::map<std::pair<std::uint32_t, Pass>, std::vector<std::uint64_t>> by_run_;
  std::uint64_t next_id_ = 1;
};

}  // namespace promptreco
