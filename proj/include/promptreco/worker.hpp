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

// The reconstruction worker. It pulls single events from a logging
// manager, filters and reconstructs them with the run's calibration,
// buffers the output and flushes it to the event store when the buffer is
// full or a jittered deadline passes. Only after the store has accepted a
// flush are its events reported committed.

#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "promptreco/conditions.hpp"
#include "promptreco/dispatch.hpp"
#include "promptreco/evstore.hpp"

namespace promptreco {

/// Deterministic in (run, event_id): accept iff hash64(run, event_id) / 2^64 < fraction.
bool filter(const EventRecord& e, double accept_fraction);

struct RecoOutput {
  RunId run;
  std::uint32_t event_id = 0;
  std::uint32_t tag = 0;
  std::vector<double> corrected;  // micro
  std::vector<double> raw;        // mini: the readings that produced `corrected`
  std::vector<std::string> stream_set;
  std::vector<std::string> skim_set;
  std::string calib_version;
  RunId calib_validity;

  /// Zero-padded to `target_bytes` when the content is shorter.
  Bytes serialize(std::size_t target_bytes = 0) const;
  static RecoOutput deserialize(ByteView data);

  friend bool operator==(const RecoOutput&, const RecoOutput&) = default;
};

/// corrected = (reading - pedestal) / gain per subsystem. The low eight tag
/// bits are replaced by "corrected[k] > 5" flags; the rest carry over.
RecoOutput reconstruct(const EventRecord& e, const RollingCalibration& cal);
void assign_streams(RecoOutput& out, const StreamRegistry& registry);

/// Pointer record stored in a skim collection.
Bytes skim_pointer(std::string_view parent_collection, std::uint32_t event_id);

struct PendingEvent {
  std::uint32_t event_id = 0;
  std::vector<StoredRecord> stream_records;
  std::vector<StoredRecord> skim_records;
  std::uint64_t bytes = 0;
};

/// Output cache with a size trigger and a jittered time trigger. Times are
/// caller-supplied seconds so the policy can be driven by a simulated clock.
class CommitBuffer {
 public:
  CommitBuffer(std::uint64_t cache_bytes, double interval_s, double jitter_fraction, std::uint64_t seed);

  void start(double now);
  void add(PendingEvent e);
  bool should_flush(double now) const;
  std::vector<PendingEvent> take(double now);

  bool empty() const { return pending_.empty(); }
  std::uint64_t bytes_used() const { return bytes_; }
  double next_deadline() const { return deadline_; }
  double last_commit() const { return last_commit_; }

 private:
  double draw_interval();

  std::uint64_t cache_bytes_;
  double interval_s_, jitter_;
  std::mt19937_64 rng_;
  std::vector<PendingEvent> pending_;
  std::uint64_t bytes_ = 0;
  double deadline_ = 0, last_commit_ = 0;
};

// -- ports -----------------------------------------------------------------------

class LmPort {
 public:
  virtual ~LmPort() = default;
  virtual LmReply next() = 0;
  virtual void processed(std::uint32_t event_id, bool filtered) = 0;
  virtual void committed(std::span<const std::uint32_t> event_ids) = 0;
  /// Abrupt death: drop the connection without any further messages.
  virtual void crash() = 0;
};

class StorePort {
 public:
  virtual ~StorePort() = default;
  virtual ContainerLease lease(Category category) = 0;
  virtual CommitReceipt commit(const ContainerLease& lease, std::span<const StoredRecord> records) = 0;
  virtual void release(const ContainerLease& lease) = 0;
  virtual void crash() = 0;
};

class ConditionsPort {
 public:
  virtual ~ConditionsPort() = default;
  virtual RollingCalibration lookup(RunId run, LookupMode mode) = 0;
};

class LocalLm : public LmPort {
 public:
  LocalLm(LoggingManager& lm, std::uint32_t worker);
  ~LocalLm() override;
  LmReply next() override { return lm_.next(worker_); }
  void processed(std::uint32_t id, bool filtered) override { lm_.processed(worker_, id, filtered); }
  void committed(std::span<const std::uint32_t> ids) override { lm_.committed(worker_, ids); }
  void crash() override;

 private:
  LoggingManager& lm_;
  std::uint32_t worker_;
  bool gone_ = false;
};

class LocalStore : public StorePort {
 public:
  LocalStore(EventStore& store, std::uint32_t holder) : store_(store), holder_(holder) {}
  ContainerLease lease(Category c) override { return store_.request_container(c, holder_); }
  CommitReceipt commit(const ContainerLease& l, std::span<const StoredRecord> r) override {
    return store_.commit_batch(l, r);
  }
  void release(const ContainerLease& l) override { store_.release(l); }
  /// Mirrors what the store daemon does when a client connection drops.
  void crash() override { store_.release_holder(holder_); }

 private:
  EventStore& store_;
  std::uint32_t holder_;
};

class LocalConditions : public ConditionsPort {
 public:
  LocalConditions(const ConditionsStore& store, std::string federation)
      : store_(store), federation_(std::move(federation)) {}
  RollingCalibration lookup(RunId run, LookupMode mode) override { return store_.lookup(federation_, run, mode); }

 private:
  const ConditionsStore& store_;
  std::string federation_;
};

class LmClient : public LmPort {
 public:
  LmClient(const Endpoint& ep, std::uint32_t worker);
  LmReply next() override;
  void processed(std::uint32_t id, bool filtered) override;
  void committed(std::span<const std::uint32_t> ids) override;
  void crash() override { sock_.close(); }

 private:
  Socket sock_;
};

// -- the worker loop -------------------------------------------------------------

enum class FaultPoint {
  after_assign,        // while processing: the event is in flight
  after_processed,     // buffered, not yet flushed
  mid_store_commit,    // part of a flush is in the store
  after_store_commit,  // all of a flush is in the store, LM not told
  after_lm_commit,
};
std::string_view to_string(FaultPoint p);

struct WorkerFaults {
  /// Return true to kill the worker at this point.
  std::function<bool(FaultPoint, std::uint32_t event_id)> crash_at;
  /// Events whose reconstruction always kills the worker.
  std::set<std::uint32_t> poison;
};

struct WorkerContext {
  std::uint32_t worker_id = 1;
  PipelineConfig config;
  LookupMode mode = LookupMode::two_pass;
  StreamRegistry registry = StreamRegistry::standard();
  /// Full collection name per registry label (streams then skims).
  std::vector<std::string> collections;
  std::uint64_t seed = 1;
  WorkerFaults faults;
  std::atomic<std::uint64_t>* processed_counter = nullptr;
  std::chrono::milliseconds store_backoff{20};
  int store_retries = 50;
};

struct WorkerSummary {
  std::uint32_t worker = 0;
  std::uint64_t assigned = 0;
  std::uint64_t accepted = 0;
  std::uint64_t filtered = 0;
  std::uint64_t committed = 0;
  std::uint64_t flushes = 0;
  std::uint64_t records_written = 0;
  std::uint64_t duplicates_skipped = 0;
  std::optional<std::string> calib_version;
  std::optional<RunId> calib_validity;
  bool crashed = false;
  std::optional<std::string> error;
  std::vector<double> commit_times;
};

/// Collection names for one ER attempt, in registry label order.
std::vector<std::string> collection_names(const StreamRegistry& registry, std::string_view release, bool production,
                                          std::uint32_t version, RunId run, const NamingScheme& scheme = {});

WorkerSummary run_worker(WorkerContext ctx, LmPort& lm, StorePort& store, ConditionsPort& conditions);

}  // namespace promptreco
