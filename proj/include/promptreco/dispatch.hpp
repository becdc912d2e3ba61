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

// The logging manager: reads one run's XTC file in order and hands events
// to workers one at a time, tracking every event to exactly one terminal
// state.
//
// Per-event states:
//
//   unsent -> in_flight(w) -> processed_uncommitted(w) -> committed
//                          \-> filtered_out
//   in_flight(w)              --w dies--> redeliverable | killer
//   processed_uncommitted(w)  --w dies--> redeliverable
//   redeliverable -> in_flight(w')
//
// An event becomes a killer once it has been in flight on `killer_threshold`
// workers that died while holding it. Deaths in the commit window do not
// count against the event.

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/net.hpp"
#include "promptreco/xtc.hpp"

namespace promptreco {

class ProtocolError : public Error {
 public:
  using Error::Error;
};

enum class EventState : std::uint8_t {
  unsent,
  in_flight,
  processed_uncommitted,
  committed,
  filtered_out,
  killer,
  redeliverable,
};
std::string_view to_string(EventState s);
bool is_terminal(EventState s);

struct Decision {
  enum Kind : std::uint8_t { hello, assign, processed, filtered, committed, disconnect, redeliver, quarantine, violation };
  std::uint64_t seq = 0;
  Kind kind = hello;
  std::uint32_t worker = 0;
  std::uint32_t event_id = 0;
  std::uint32_t attempt = 0;
};
std::string_view to_string(Decision::Kind k);
nlohmann::json to_json(const Decision& d);
Decision decision_from_json(const nlohmann::json& j);

struct RunSummary {
  RunId run;
  std::uint64_t read = 0;
  std::uint64_t filtered_out = 0;
  std::uint64_t committed = 0;
  std::uint64_t killer = 0;
  std::uint64_t redelivered = 0;
  double wall_s = 0;
  std::vector<std::uint32_t> killer_events;

  bool balanced() const { return read == committed + killer + filtered_out; }
  nlohmann::json to_json() const;
};

/// The authoritative per-event state machine. Not thread-safe on its own;
/// LoggingManager serializes access.
class DeliveryLedger {
 public:
  /// `load(index)` is called exactly once per event, in index order, the
  /// first time the event is issued, and returns its event id.
  DeliveryLedger(std::size_t n_events, std::uint32_t killer_threshold,
                 std::function<std::uint32_t(std::size_t)> load = [](std::size_t i) { return static_cast<std::uint32_t>(i); });

  struct Next {
    enum Kind { assign, wait, end } kind = end;
    std::size_t index = 0;
    std::uint32_t event_id = 0;
    std::uint32_t attempt = 0;
  };

  void hello(std::uint32_t worker);
  Next next(std::uint32_t worker);
  void processed(std::uint32_t worker, std::uint32_t event_id, bool filtered);
  void committed(std::uint32_t worker, std::span<const std::uint32_t> event_ids);
  void disconnect(std::uint32_t worker);

  bool finished() const { return terminal_ == slots_.size(); }
  std::size_t size() const { return slots_.size(); }
  std::size_t issued() const { return cursor_; }
  EventState state(std::size_t index) const { return slots_.at(index).state; }
  std::uint32_t attempts(std::size_t index) const { return slots_.at(index).attempts; }
  std::optional<std::size_t> index_of(std::uint32_t event_id) const;
  bool connected(std::uint32_t worker) const { return workers_.count(worker) != 0; }

  RunSummary summary() const;
  const std::vector<Decision>& decisions() const { return decisions_; }
  void on_decision(std::function<void(const Decision&)> sink) { sink_ = std::move(sink); }

 private:
  struct Slot {
    EventState state = EventState::unsent;
    std::uint32_t event_id = 0;
    std::uint32_t attempts = 0;
    std::uint32_t crashes = 0;
    std::uint32_t holder = 0;
  };
  struct WorkerSlot {
    std::optional<std::size_t> in_flight;
    std::set<std::size_t> uncommitted;
  };

  Slot& held_by(std::uint32_t worker, std::uint32_t event_id, EventState expected);
  void log(Decision::Kind kind, std::uint32_t worker, const Slot& s);
  void finish(Slot& s, EventState terminal);

  std::vector<Slot> slots_;
  std::uint32_t killer_threshold_;
  std::function<std::uint32_t(std::size_t)> load_;
  std::size_t cursor_ = 0;
  std::set<std::size_t> redeliverable_;
  std::unordered_map<std::uint32_t, std::size_t> by_id_;
  std::map<std::uint32_t, WorkerSlot> workers_;
  std::size_t terminal_ = 0;
  std::uint64_t redelivered_ = 0;
  std::vector<Decision> decisions_;
  std::function<void(const Decision&)> sink_;
};

struct LedgerAudit {
  std::vector<std::string> violations;
  std::uint64_t committed = 0, filtered = 0, killer = 0;
  bool ok() const { return violations.empty(); }
};

/// Replays a decision log from scratch and checks exactly-once terminal
/// marking, single-committer ownership, killer isolation and first-issue
/// order.
LedgerAudit audit_decisions(std::span<const Decision> log, std::size_t n_events);

// -- the server ------------------------------------------------------------------

struct LmReply {
  DeliveryLedger::Next::Kind kind = DeliveryLedger::Next::end;
  std::uint32_t attempt = 0;
  EventRecord event;
  Bytes frame;
  std::chrono::milliseconds retry_after{0};
};

/// Thread-safe front end over the ledger and the sequential XTC reader.
class LoggingManager {
 public:
  LoggingManager(const std::filesystem::path& xtc, std::uint32_t killer_threshold,
                 std::optional<std::filesystem::path> decision_log = std::nullopt);
  ~LoggingManager();

  const XtcHeader& header() const { return header_; }
  void hello(std::uint32_t worker);
  LmReply next(std::uint32_t worker);
  void processed(std::uint32_t worker, std::uint32_t event_id, bool filtered);
  void committed(std::uint32_t worker, std::span<const std::uint32_t> event_ids);
  void disconnect(std::uint32_t worker);

  bool finished() const;
  bool wait_finished(std::chrono::milliseconds timeout) const;
  RunSummary summary() const;
  std::vector<Decision> decisions() const;
  /// Raw frame bytes in file order, for audits.
  std::size_t frames_read() const;

  std::chrono::milliseconds wait_hint{10};

 private:
  std::uint32_t load(std::size_t index);

  XtcReader reader_;
  XtcHeader header_;
  std::vector<Bytes> frames_;
  std::unique_ptr<DeliveryLedger> ledger_;
  std::ofstream log_;
  mutable std::mutex mu_;
  mutable std::condition_variable done_cv_;
  std::chrono::steady_clock::time_point started_;
  std::optional<double> wall_s_;
};

namespace lm_wire {
// ASSIGN carries u32 attempt | u32 run | XTC frame.
enum Type : std::uint8_t {
  HELLO = 1,
  NEXT = 2,
  ASSIGN = 3,
  EOR = 4,
  PROCESSED = 5,
  COMMITTED = 6,
  ERR = 7,
  WAIT = 8,
};
enum ErrCode : std::uint16_t { protocol = 1, internal = 2 };
}  // namespace lm_wire

class LmServer {
 public:
  LmServer(LoggingManager& lm, const Endpoint& ep);
  ~LmServer();
  Endpoint endpoint() const { return server_.endpoint(); }
  std::size_t active_connections() const { return active_.load(); }
  void stop() { server_.stop(); }

 private:
  void handle(Socket& s);

  LoggingManager& lm_;
  std::atomic<std::size_t> active_{0};
  FrameServer server_;
};

/// Serves one run until every event is terminal, then gives connected
/// workers a grace period to collect their end-of-run.
RunSummary serve(const std::filesystem::path& xtc, const Endpoint& ep, const PipelineConfig& cfg,
                 std::optional<std::filesystem::path> decision_log = std::nullopt,
                 std::function<void(const Endpoint&)> on_listening = {});

}  // namespace promptreco
