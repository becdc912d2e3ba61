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

#include <fstream>
#include <future>
#include <map>
#include <random>
#include <thread>

#include "doctest.h"
#include "oracles.hpp"
#include "promptreco/dispatch.hpp"
#include "promptreco/worker.hpp"

using namespace promptreco;
using Next = DeliveryLedger::Next;

namespace {

// Drives `worker` through events until it holds `target`.
void process_until(DeliveryLedger& l, std::uint32_t worker, std::uint32_t target) {
  while (true) {
    auto n = l.next(worker);
    REQUIRE(n.kind == Next::assign);
    if (n.event_id == target) return;
    l.processed(worker, n.event_id, false);
    std::uint32_t id = n.event_id;
    l.committed(worker, std::span(&id, 1));
  }
}

// Reference model for the ledger, written from the state diagram alone.
struct Model {
  enum S { unsent, flight, uncommitted, committed, filtered, killer, again };
  struct E {
    S s = unsent;
    int holder = -1;
    unsigned attempts = 0, crashes = 0;
  };
  std::vector<E> ev;
  std::map<int, int> held;  // worker -> in-flight event or -1
  unsigned threshold;
  Model(std::size_t n, unsigned t) : ev(n), threshold(t) {}

  std::optional<int> next(int w) {
    for (std::size_t i = 0; i < ev.size(); ++i)
      if (ev[i].s == again) return take(w, i);
    for (std::size_t i = 0; i < ev.size(); ++i)
      if (ev[i].s == unsent) return take(w, i);
    return std::nullopt;
  }
  int take(int w, std::size_t i) {
    ev[i].s = flight;
    ev[i].holder = w;
    ++ev[i].attempts;
    held[w] = static_cast<int>(i);
    return static_cast<int>(i);
  }
  void die(int w) {
    if (held[w] >= 0) {
      auto& e = ev[held[w]];
      e.s = ++e.crashes >= threshold ? killer : again;
    }
    for (auto& e : ev)
      if (e.s == uncommitted && e.holder == w) e.s = again;
    held.erase(w);
  }
};

EventState to_state(Model::S s) {
  switch (s) {
    case Model::unsent: return EventState::unsent;
    case Model::flight: return EventState::in_flight;
    case Model::uncommitted: return EventState::processed_uncommitted;
    case Model::committed: return EventState::committed;
    case Model::filtered: return EventState::filtered_out;
    case Model::killer: return EventState::killer;
    case Model::again: return EventState::redeliverable;
  }
  return EventState::unsent;
}

}  // namespace

TEST_CASE("fresh run issues event 0 at attempt 1 and ends when all are terminal") {
  DeliveryLedger l(3, 1);
  l.hello(1);
  auto n = l.next(1);
  CHECK(n.kind == Next::assign);
  CHECK(n.index == 0);
  CHECK(n.attempt == 1);
  l.processed(1, 0, true);
  for (std::uint32_t i = 1; i < 3; ++i) {
    auto m = l.next(1);
    l.processed(1, m.event_id, false);
  }
  CHECK(l.next(1).kind == Next::wait);  // two events await commit
  std::vector<std::uint32_t> ids{1, 2};
  l.committed(1, ids);
  CHECK(l.finished());
  CHECK(l.next(1).kind == Next::end);
  auto s = l.summary();
  CHECK(s.read == 3);
  CHECK(s.committed == 2);
  CHECK(s.filtered_out == 1);
  CHECK(s.balanced());
}

TEST_CASE("protocol violations") {
  DeliveryLedger l(10, 1);
  CHECK_THROWS_AS(l.next(1), ProtocolError);
  l.hello(1);
  l.hello(2);
  CHECK_THROWS_AS(l.hello(1), ProtocolError);
  auto n = l.next(1);
  CHECK_THROWS_AS(l.next(1), ProtocolError);
  CHECK_THROWS_AS(l.processed(2, n.event_id, false), ProtocolError);
  CHECK_THROWS_AS(l.processed(1, 99, false), ProtocolError);
  l.processed(1, n.event_id, false);
  std::vector<std::uint32_t> ids{n.event_id};
  CHECK_THROWS_AS(l.committed(2, ids), ProtocolError);
  l.committed(1, ids);
  CHECK_THROWS_AS(l.committed(1, ids), ProtocolError);  // terminal states are immutable
  auto m = l.next(1);
  l.processed(1, m.event_id, false);
  std::vector<std::uint32_t> twice{m.event_id, m.event_id};
  CHECK_THROWS_AS(l.committed(1, twice), ProtocolError);
  CHECK(l.state(*l.index_of(m.event_id)) == EventState::processed_uncommitted);
}

TEST_CASE("redelivery after a crash goes to another worker with the next attempt") {
  DeliveryLedger l(20, 2);
  l.hello(1);
  l.hello(2);
  process_until(l, 1, 7);
  l.disconnect(1);
  auto n = l.next(2);
  CHECK(n.event_id == 7);
  CHECK(n.attempt == 2);
  CHECK(l.summary().redelivered == 1);
}

TEST_CASE("threshold 1 quarantines the in-flight event immediately") {
  DeliveryLedger l(5, 1);
  l.hello(1);
  l.hello(2);
  process_until(l, 1, 2);
  l.disconnect(1);
  CHECK(l.state(2) == EventState::killer);
  for (int i = 0; i < 2; ++i) {
    auto n = l.next(2);
    CHECK(n.event_id != 2);
    l.processed(2, n.event_id, true);
  }
  CHECK(l.finished());
  CHECK(l.summary().killer_events == std::vector<std::uint32_t>{2});
  CHECK(audit_decisions(l.decisions(), 5).ok());
}

TEST_CASE("threshold 3: two crashes leave the event redeliverable, the third quarantines it") {
  DeliveryLedger l(1, 3);
  for (std::uint32_t w = 1; w <= 3; ++w) {
    l.hello(w);
    auto n = l.next(w);
    CHECK(n.event_id == 0);
    CHECK(n.attempt == w);
    l.disconnect(w);
    CHECK(l.state(0) == (w < 3 ? EventState::redeliverable : EventState::killer));
  }
  CHECK(l.finished());
}

TEST_CASE("a crash in the commit window redelivers and is not a killer") {
  DeliveryLedger l(3, 1);
  l.hello(1);
  auto n = l.next(1);
  l.processed(1, n.event_id, false);
  l.disconnect(1);
  CHECK(l.state(0) == EventState::redeliverable);
  l.hello(2);
  auto m = l.next(2);
  CHECK(m.event_id == 0);
  CHECK(m.attempt == 2);
}

TEST_CASE("a commit report that precedes the disconnect stands") {
  DeliveryLedger l(2, 1);
  l.hello(1);
  auto n = l.next(1);
  l.processed(1, n.event_id, false);
  std::vector<std::uint32_t> ids{n.event_id};
  l.committed(1, ids);
  l.disconnect(1);
  CHECK(l.state(0) == EventState::committed);
  CHECK(l.summary().redelivered == 0);
}

TEST_CASE("disconnect with nothing held changes no event") {
  DeliveryLedger l(2, 1);
  l.hello(1);
  l.disconnect(1);
  l.disconnect(1);
  CHECK(l.state(0) == EventState::unsent);
  CHECK(l.state(1) == EventState::unsent);
}

TEST_CASE("property: ledger agrees with the reference model over random schedules") {
  std::mt19937_64 rng(42);
  for (int round = 0; round < 300; ++round) {
    const std::size_t n = 1 + rng() % 6;
    const unsigned threshold = 1 + rng() % 3;
    DeliveryLedger l(n, threshold);
    Model m(n, threshold);
    int next_worker = 1;
    std::vector<int> live;
    for (int step = 0; step < 60 && !l.finished(); ++step) {
      auto op = rng() % 10;
      if (live.empty() || op == 0) {
        l.hello(next_worker);
        m.held[next_worker] = -1;
        live.push_back(next_worker++);
        continue;
      }
      int w = live[rng() % live.size()];
      if (op == 1) {
        l.disconnect(w);
        m.die(w);
        live.erase(std::find(live.begin(), live.end(), w));
      } else if (m.held[w] < 0) {
        auto got = l.next(w);
        auto want = m.next(w);
        if (!want) {
          CHECK(got.kind != Next::assign);
          // Flush whatever this worker holds uncommitted.
          std::vector<std::uint32_t> ids;
          for (std::size_t i = 0; i < n; ++i)
            if (m.ev[i].s == Model::uncommitted && m.ev[i].holder == w) {
              ids.push_back(static_cast<std::uint32_t>(i));
              m.ev[i].s = Model::committed;
            }
          l.committed(w, ids);
        } else {
          REQUIRE(got.kind == Next::assign);
          CHECK(got.index == static_cast<std::size_t>(*want));
          CHECK(got.attempt == m.ev[*want].attempts);
        }
      } else {
        auto e = m.held[w];
        bool filtered = rng() % 3 == 0;
        l.processed(w, static_cast<std::uint32_t>(e), filtered);
        m.ev[e].s = filtered ? Model::filtered : Model::uncommitted;
        m.held[w] = -1;
      }
      for (std::size_t i = 0; i < n; ++i) CHECK(l.state(i) == to_state(m.ev[i].s));
    }
  }
}

TEST_CASE("audit flags doctored decision logs") {
  DeliveryLedger l(2, 1);
  l.hello(1);
  for (int i = 0; i < 2; ++i) {
    auto n = l.next(1);
    l.processed(1, n.event_id, false);
  }
  std::vector<std::uint32_t> ids{0, 1};
  l.committed(1, ids);
  auto log = l.decisions();
  CHECK(audit_decisions(log, 2).ok());

  auto dup = log;
  dup.push_back(dup.back());
  dup.back().seq = dup.size();
  CHECK_FALSE(audit_decisions(dup, 2).ok());

  auto lost = log;
  lost.pop_back();
  CHECK_FALSE(audit_decisions(lost, 2).ok());

  auto reordered = log;
  std::swap(reordered[1].event_id, reordered[3].event_id);  // first issue out of file order
  CHECK_FALSE(audit_decisions(reordered, 2).ok());
}

TEST_CASE("logging manager over TCP serves a run to one worker") {
  oracle::TempDir dir("lm");
  auto xtc = dir / "run.xtc";
  generate_run(xtc, RunId(5), 100, 10.0, DetectorTruth{}, 256);
  auto log_path = dir / "decisions.jsonl";
  LoggingManager lm(xtc, 1, log_path);
  LmServer server(lm, Endpoint::parse("127.0.0.1:0"));
  CHECK(server.endpoint().port != 0);

  LmClient client(server.endpoint(), 7);
  std::vector<std::uint32_t> pending;
  std::uint32_t expect = 0;
  while (true) {
    auto r = client.next();
    if (r.kind == Next::end) break;
    if (r.kind == Next::wait) {
      client.committed(pending);
      pending.clear();
      continue;
    }
    CHECK(r.event.event_id == expect++);
    CHECK(r.event.run == RunId(5));
    CHECK(r.attempt == 1);
    bool accept = filter(r.event, 0.375);
    client.processed(r.event.event_id, !accept);
    if (accept) pending.push_back(r.event.event_id);
  }
  CHECK(lm.wait_finished(std::chrono::seconds(5)));
  auto s = lm.summary();
  CHECK(s.read == 100);
  CHECK(s.committed + s.filtered_out == 100);
  CHECK(s.redelivered == 0);
  CHECK(lm.frames_read() == 100);
  server.stop();

  // The JSON-lines log replays to the same decisions and audits clean.
  std::vector<Decision> replay;
  std::ifstream in(log_path);
  for (std::string line; std::getline(in, line);) replay.push_back(decision_from_json(nlohmann::json::parse(line)));
  auto mem = lm.decisions();
  REQUIRE(replay.size() == mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) CHECK(to_json(replay[i]) == to_json(mem[i]));
  CHECK(audit_decisions(replay, 100).ok());
}

TEST_CASE("a protocol violation over TCP closes the connection and releases the event") {
  oracle::TempDir dir("lm");
  auto xtc = dir / "run.xtc";
  generate_run(xtc, RunId(5), 10, 10.0, DetectorTruth{}, 256);
  LoggingManager lm(xtc, 2);
  LmServer server(lm, Endpoint::parse("127.0.0.1:0"));
  {
    LmClient client(server.endpoint(), 1);
    auto r = client.next();
    CHECK(r.kind == Next::assign);
    CHECK_THROWS_AS(client.next(), ProtocolError);
  }
  for (int i = 0; i < 100 && server.active_connections() > 0; ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  LmClient other(server.endpoint(), 2);
  auto r = other.next();
  CHECK(r.event.event_id == 0);
  CHECK(r.attempt == 2);
}

TEST_CASE("serve returns a balanced summary") {
  oracle::TempDir dir("lm");
  auto xtc = dir / "run.xtc";
  generate_run(xtc, RunId(9), 300, 10.0, DetectorTruth{}, 256);
  std::promise<Endpoint> where;
  auto fut = where.get_future();
  std::thread worker([&] {
    LmClient c(fut.get(), 3);
    std::vector<std::uint32_t> pending;
    while (true) {
      auto r = c.next();
      if (r.kind == Next::end) break;
      if (r.kind == Next::wait) {
        c.committed(pending);
        pending.clear();
        continue;
      }
      c.processed(r.event.event_id, false);
      pending.push_back(r.event.event_id);
    }
  });
  auto s = serve(xtc, Endpoint::parse("127.0.0.1:0"), PipelineConfig{}, std::nullopt,
                 [&](const Endpoint& ep) { where.set_value(ep); });
  worker.join();
  CHECK(s.read == 300);
  CHECK(s.committed == 300);
  CHECK(s.balanced());
}
