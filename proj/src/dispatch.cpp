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

#include "promptreco/dispatch.hpp"

#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace promptreco {

using Kind = Decision::Kind;

std::string_view to_string(EventState s) {
  switch (s) {
    case EventState::unsent: return "unsent";
    case EventState::in_flight: return "in_flight";
    case EventState::processed_uncommitted: return "processed_uncommitted";
    case EventState::committed: return "committed";
    case EventState::filtered_out: return "filtered_out";
    case EventState::killer: return "killer";
    case EventState::redeliverable: return "redeliverable";
  }
  return "?";
}

bool is_terminal(EventState s) {
  return s == EventState::committed || s == EventState::filtered_out || s == EventState::killer;
}

namespace {
constexpr std::string_view kKindNames[] = {"hello",      "assign",    "processed",  "filtered",  "committed",
                                           "disconnect", "redeliver", "quarantine", "violation"};
}

std::string_view to_string(Decision::Kind k) { return kKindNames[k]; }

nlohmann::json to_json(const Decision& d) {
  return {{"seq", d.seq}, {"kind", to_string(d.kind)}, {"worker", d.worker}, {"event", d.event_id}, {"attempt", d.attempt}};
}

Decision decision_from_json(const nlohmann::json& j) {
  Decision d;
  d.seq = j.at("seq");
  auto kind = j.at("kind").get<std::string>();
  auto it = std::find(std::begin(kKindNames), std::end(kKindNames), kind);
  if (it == std::end(kKindNames)) throw DecodeError(fmt::format("unknown decision kind '{}'", kind));
  d.kind = static_cast<Kind>(it - std::begin(kKindNames));
  d.worker = j.at("worker");
  d.event_id = j.at("event");
  d.attempt = j.at("attempt");
  return d;
}

nlohmann::json RunSummary::to_json() const {
  return {{"run", run.value()},         {"read", read},         {"filtered_out", filtered_out},
          {"committed", committed},     {"killer", killer},     {"redelivered", redelivered},
          {"wall_s", wall_s},           {"killer_events", killer_events}};
}

// -- DeliveryLedger --------------------------------------------------------------

DeliveryLedger::DeliveryLedger(std::size_t n_events, std::uint32_t killer_threshold,
                               std::function<std::uint32_t(std::size_t)> load)
    : slots_(n_events), killer_threshold_(killer_threshold), load_(std::move(load)) {
  if (killer_threshold_ == 0) throw ConfigError("killer_threshold must be at least 1");
}

void DeliveryLedger::log(Kind kind, std::uint32_t worker, const Slot& s) {
  decisions_.push_back({decisions_.size() + 1, kind, worker, s.event_id, s.attempts});
  if (sink_) sink_(decisions_.back());
}

void DeliveryLedger::hello(std::uint32_t worker) {
  if (!workers_.emplace(worker, WorkerSlot{}).second)
    throw ProtocolError(fmt::format("worker {} is already connected", worker));
  decisions_.push_back({decisions_.size() + 1, Kind::hello, worker, 0, 0});
  if (sink_) sink_(decisions_.back());
}

DeliveryLedger::Next DeliveryLedger::next(std::uint32_t worker) {
  auto w = workers_.find(worker);
  if (w == workers_.end()) throw ProtocolError(fmt::format("worker {} never said hello", worker));
  if (w->second.in_flight) throw ProtocolError(fmt::format("worker {} asked for more while holding an event", worker));
  if (finished()) return {Next::end};

  std::size_t index;
  if (!redeliverable_.empty()) {
    // Redeliverable events always precede the read cursor.
    index = *redeliverable_.begin();
    redeliverable_.erase(redeliverable_.begin());
    ++redelivered_;
  } else if (cursor_ < slots_.size()) {
    index = cursor_++;
    slots_[index].event_id = load_(index);
    by_id_.emplace(slots_[index].event_id, index);
  } else {
    return {Next::wait};
  }
  auto& s = slots_[index];
  s.state = EventState::in_flight;
  s.holder = worker;
  ++s.attempts;
  w->second.in_flight = index;
  log(Kind::assign, worker, s);
  return {Next::assign, index, s.event_id, s.attempts};
}

DeliveryLedger::Slot& DeliveryLedger::held_by(std::uint32_t worker, std::uint32_t event_id, EventState expected) {
  auto it = by_id_.find(event_id);
  if (it == by_id_.end()) throw ProtocolError(fmt::format("unknown event {}", event_id));
  auto& s = slots_[it->second];
  if (s.state != expected || s.holder != worker)
    throw ProtocolError(fmt::format("event {} is {} and not held by worker {}", event_id, to_string(s.state), worker));
  return s;
}

void DeliveryLedger::finish(Slot& s, EventState terminal) {
  s.state = terminal;
  ++terminal_;
}

void DeliveryLedger::processed(std::uint32_t worker, std::uint32_t event_id, bool filtered) {
  auto w = workers_.find(worker);
  if (w == workers_.end()) throw ProtocolError(fmt::format("worker {} never said hello", worker));
  auto& s = held_by(worker, event_id, EventState::in_flight);
  auto index = static_cast<std::size_t>(&s - slots_.data());
  w->second.in_flight.reset();
  if (filtered) {
    finish(s, EventState::filtered_out);
    log(Kind::filtered, worker, s);
  } else {
    s.state = EventState::processed_uncommitted;
    w->second.uncommitted.insert(index);
    log(Kind::processed, worker, s);
  }
}

void DeliveryLedger::committed(std::uint32_t worker, std::span<const std::uint32_t> event_ids) {
  auto w = workers_.find(worker);
  if (w == workers_.end()) throw ProtocolError(fmt::format("worker {} never said hello", worker));
  // Validate the whole report before changing anything.
  std::set<std::uint32_t> seen;
  for (auto id : event_ids) {
    held_by(worker, id, EventState::processed_uncommitted);
    if (!seen.insert(id).second) throw ProtocolError(fmt::format("event {} listed twice in one commit report", id));
  }
  for (auto id : event_ids) {
    auto index = by_id_.at(id);
    finish(slots_[index], EventState::committed);
    w->second.uncommitted.erase(index);
    log(Kind::committed, worker, slots_[index]);
  }
}

void DeliveryLedger::disconnect(std::uint32_t worker) {
  auto w = workers_.find(worker);
  if (w == workers_.end()) return;
  decisions_.push_back({decisions_.size() + 1, Kind::disconnect, worker, 0, 0});
  if (sink_) sink_(decisions_.back());
  if (w->second.in_flight) {
    auto& s = slots_[*w->second.in_flight];
    if (++s.crashes >= killer_threshold_) {
      finish(s, EventState::killer);
      log(Kind::quarantine, worker, s);
    } else {
      s.state = EventState::redeliverable;
      redeliverable_.insert(*w->second.in_flight);
      log(Kind::redeliver, worker, s);
    }
  }
  for (auto index : w->second.uncommitted) {
    auto& s = slots_[index];
    s.state = EventState::redeliverable;
    redeliverable_.insert(index);
    log(Kind::redeliver, worker, s);
  }
  workers_.erase(w);
}

std::optional<std::size_t> DeliveryLedger::index_of(std::uint32_t event_id) const {
  auto it = by_id_.find(event_id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

RunSummary DeliveryLedger::summary() const {
  RunSummary r;
  r.read = cursor_;
  r.redelivered = redelivered_;
  for (const auto& s : slots_) {
    switch (s.state) {
      case EventState::committed: ++r.committed; break;
      case EventState::filtered_out: ++r.filtered_out; break;
      case EventState::killer:
        ++r.killer;
        r.killer_events.push_back(s.event_id);
        break;
      default: break;
    }
  }
  return r;
}

// -- audit -----------------------------------------------------------------------

LedgerAudit audit_decisions(std::span<const Decision> log, std::size_t n_events) {
  LedgerAudit a;
  auto fail = [&](const Decision& d, std::string what) {
    if (a.violations.size() < 50)
      a.violations.push_back(fmt::format("seq {} ({} w{} e{}): {}", d.seq, to_string(d.kind), d.worker, d.event_id, what));
  };
  struct Ev {
    EventState state = EventState::unsent;
    std::uint32_t holder = 0;
    int committers = 0;
  };
  std::map<std::uint32_t, Ev> ev;
  std::map<std::uint32_t, std::optional<std::uint32_t>> in_flight;  // live workers
  std::optional<std::uint32_t> last_first_issue;
  std::uint64_t expect_seq = 1;
  std::optional<std::uint32_t> releasing;  // worker whose disconnect is being unwound

  auto close_release = [&](const Decision& d) {
    if (!releasing) return;
    for (auto& [id, e] : ev)
      if ((e.state == EventState::in_flight || e.state == EventState::processed_uncommitted) && e.holder == *releasing)
        fail(d, fmt::format("event {} still held by disconnected worker {}", id, *releasing));
    releasing.reset();
  };

  for (const auto& d : log) {
    if (d.seq != expect_seq) fail(d, "decision sequence has a gap");
    expect_seq = d.seq + 1;
    if (d.kind != Kind::redeliver && d.kind != Kind::quarantine) close_release(d);
    switch (d.kind) {
      case Kind::hello:
        if (in_flight.count(d.worker)) fail(d, "duplicate hello");
        in_flight[d.worker] = std::nullopt;
        break;
      case Kind::assign: {
        auto w = in_flight.find(d.worker);
        if (w == in_flight.end()) { fail(d, "assignment to unknown worker"); break; }
        if (w->second) fail(d, "worker already holds an event");
        auto [it, fresh] = ev.try_emplace(d.event_id);
        auto& e = it->second;
        if (fresh) {
          if (last_first_issue && d.event_id <= *last_first_issue) fail(d, "first issue out of file order");
          last_first_issue = d.event_id;
        } else if (e.state == EventState::killer) {
          fail(d, "killer event reissued");
        } else if (e.state != EventState::redeliverable) {
          fail(d, fmt::format("assigned while {}", to_string(e.state)));
        }
        e.state = EventState::in_flight;
        e.holder = d.worker;
        w->second = d.event_id;
        break;
      }
      case Kind::processed:
      case Kind::filtered: {
        auto& e = ev[d.event_id];
        if (e.state != EventState::in_flight || e.holder != d.worker) fail(d, "report for an event not in flight here");
        e.state = d.kind == Kind::filtered ? EventState::filtered_out : EventState::processed_uncommitted;
        if (e.state == EventState::filtered_out) ++a.filtered;
        in_flight[d.worker].reset();
        break;
      }
      case Kind::committed: {
        auto& e = ev[d.event_id];
        if (e.state != EventState::processed_uncommitted || e.holder != d.worker) fail(d, "commit of an event not held");
        if (++e.committers > 1) fail(d, "event committed twice");
        e.state = EventState::committed;
        ++a.committed;
        break;
      }
      case Kind::disconnect:
        if (!in_flight.erase(d.worker)) fail(d, "disconnect of unknown worker");
        releasing = d.worker;
        break;
      case Kind::redeliver:
      case Kind::quarantine: {
        auto& e = ev[d.event_id];
        if (!releasing || e.holder != *releasing) fail(d, "release of an event the dead worker did not hold");
        if (d.kind == Kind::quarantine && e.state != EventState::in_flight) fail(d, "quarantine outside processing");
        if (e.state != EventState::in_flight && e.state != EventState::processed_uncommitted)
          fail(d, "release of a settled event");
        e.state = d.kind == Kind::quarantine ? EventState::killer : EventState::redeliverable;
        if (d.kind == Kind::quarantine) ++a.killer;
        break;
      }
      case Kind::violation: break;
    }
  }
  if (!log.empty()) close_release(log.back());
  if (ev.size() != n_events)
    a.violations.push_back(fmt::format("{} of {} events were ever issued", ev.size(), n_events));
  for (const auto& [id, e] : ev)
    if (!is_terminal(e.state)) a.violations.push_back(fmt::format("event {} ended {}", id, to_string(e.state)));
  return a;
}

// -- LoggingManager --------------------------------------------------------------

LoggingManager::LoggingManager(const std::filesystem::path& xtc, std::uint32_t killer_threshold,
                               std::optional<std::filesystem::path> decision_log)
    : reader_(xtc), header_(reader_.header()), started_(std::chrono::steady_clock::now()) {
  ledger_ = std::make_unique<DeliveryLedger>(header_.event_count, killer_threshold,
                                             [this](std::size_t i) { return load(i); });
  if (decision_log) {
    log_.open(*decision_log, std::ios::app);
    if (!log_) throw Error(fmt::format("cannot open decision log {}", decision_log->string()));
    ledger_->on_decision([this](const Decision& d) { log_ << to_json(d).dump() << '\n'; });
  }
  frames_.reserve(header_.event_count);
}

LoggingManager::~LoggingManager() = default;

std::uint32_t LoggingManager::load(std::size_t index) {
  // Strictly sequential: index is always the next frame in the file.
  auto e = reader_.next();
  if (!e) throw CorruptionError(index, "file ended before its declared event count");
  frames_.push_back(encode_frame(*e));
  return e->event_id;
}

void LoggingManager::hello(std::uint32_t worker) {
  std::lock_guard lock(mu_);
  ledger_->hello(worker);
}

LmReply LoggingManager::next(std::uint32_t worker) {
  std::lock_guard lock(mu_);
  auto n = ledger_->next(worker);
  LmReply r;
  r.kind = n.kind;
  if (n.kind == DeliveryLedger::Next::assign) {
    r.attempt = n.attempt;
    r.frame = frames_[n.index];
    r.event = decode_frame(r.frame, header_.run, n.index);
  } else if (n.kind == DeliveryLedger::Next::wait) {
    r.retry_after = wait_hint;
  }
  return r;
}

void LoggingManager::processed(std::uint32_t worker, std::uint32_t event_id, bool filtered) {
  std::lock_guard lock(mu_);
  ledger_->processed(worker, event_id, filtered);
  if (ledger_->finished() && !wall_s_) {
    wall_s_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    done_cv_.notify_all();
  }
}

void LoggingManager::committed(std::uint32_t worker, std::span<const std::uint32_t> event_ids) {
  std::lock_guard lock(mu_);
  ledger_->committed(worker, event_ids);
  if (ledger_->finished() && !wall_s_) {
    wall_s_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    done_cv_.notify_all();
  }
}

void LoggingManager::disconnect(std::uint32_t worker) {
  std::lock_guard lock(mu_);
  ledger_->disconnect(worker);
  if (ledger_->finished() && !wall_s_) {
    wall_s_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    done_cv_.notify_all();
  }
  if (log_.is_open()) log_.flush();
}

bool LoggingManager::finished() const {
  std::lock_guard lock(mu_);
  return ledger_->finished();
}

bool LoggingManager::wait_finished(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return done_cv_.wait_for(lock, timeout, [&] { return ledger_->finished(); });
}

RunSummary LoggingManager::summary() const {
  std::lock_guard lock(mu_);
  auto s = ledger_->summary();
  s.run = header_.run;
  s.wall_s = wall_s_.value_or(std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count());
  return s;
}

std::vector<Decision> LoggingManager::decisions() const {
  std::lock_guard lock(mu_);
  return ledger_->decisions();
}

std::size_t LoggingManager::frames_read() const {
  std::lock_guard lock(mu_);
  return frames_.size();
}

// -- LmServer --------------------------------------------------------------------

LmServer::LmServer(LoggingManager& lm, const Endpoint& ep)
    : lm_(lm), server_(ep, [this](Socket& s) { handle(s); }) {}

LmServer::~LmServer() { server_.stop(); }

void LmServer::handle(Socket& s) {
  using namespace lm_wire;
  auto hello = recv_frame(s);
  if (!hello) return;
  std::uint32_t worker = 0;
  try {
    if (hello->type != HELLO) throw ProtocolError("first message must be HELLO");
    worker = ByteReader(hello->body).u32();
    lm_.hello(worker);
  } catch (const Error& e) {
    ByteWriter w;
    w.u16(protocol);
    w.str16(e.what());
    send_frame(s, ERR, w.view());
    return;
  }
  ++active_;
  struct Guard {
    LmServer* self;
    std::uint32_t worker;
    ~Guard() {
      self->lm_.disconnect(worker);
      --self->active_;
    }
  } guard{this, worker};

  while (true) {
    std::optional<Frame> f;
    try {
      f = recv_frame(s);
    } catch (const NetError&) {
      return;
    }
    if (!f) return;
    try {
      ByteReader r(f->body);
      switch (f->type) {
        case NEXT: {
          auto reply = lm_.next(worker);
          ByteWriter w;
          if (reply.kind == DeliveryLedger::Next::assign) {
            w.u32(reply.attempt);
            w.u32(reply.event.run.value());
            w.bytes(reply.frame);
            send_frame(s, ASSIGN, w.view());
          } else if (reply.kind == DeliveryLedger::Next::wait) {
            w.u32(static_cast<std::uint32_t>(reply.retry_after.count()));
            send_frame(s, WAIT, w.view());
          } else {
            send_frame(s, EOR, {});
          }
          break;
        }
        case PROCESSED: {
          auto id = r.u32();
          auto filtered = r.u8() != 0;
          lm_.processed(worker, id, filtered);
          break;
        }
        case COMMITTED: {
          auto n = r.u32();
          std::vector<std::uint32_t> ids(n);
          for (auto& id : ids) id = r.u32();
          lm_.committed(worker, ids);
          break;
        }
        default: throw ProtocolError(fmt::format("unexpected message type {}", f->type));
      }
    } catch (const NetError&) {
      return;
    } catch (const Error& e) {
      spdlog::warn("logging manager: closing worker {}: {}", worker, e.what());
      ByteWriter w;
      w.u16(dynamic_cast<const ProtocolError*>(&e) ? protocol : internal);
      w.str16(e.what());
      try {
        send_frame(s, ERR, w.view());
      } catch (const NetError&) {
      }
      return;
    }
  }
}

RunSummary serve(const std::filesystem::path& xtc, const Endpoint& ep, const PipelineConfig& cfg,
                 std::optional<std::filesystem::path> decision_log, std::function<void(const Endpoint&)> on_listening) {
  LoggingManager lm(xtc, cfg.killer_threshold, std::move(decision_log));
  LmServer server(lm, ep);
  spdlog::info("logging manager: run {} ({} events) on {}", lm.header().run.str(), lm.header().event_count,
               server.endpoint().str());
  if (on_listening) on_listening(server.endpoint());
  while (!lm.wait_finished(std::chrono::milliseconds(200))) {
  }
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
  while (server.active_connections() > 0 && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  server.stop();
  return lm.summary();
}

}  // namespace promptreco
