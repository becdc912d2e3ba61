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

// The event store.
//
// Reconstructed records live in size-capped database files. Each file is
// created at its full size as a sparse file and is divided into a fixed
// number of equally sized containers, the unit a writer locks. A lock
// server hands out time-limited leases; a clustering hint server keeps an
// in-memory inventory of free containers per category and pre-creates
// files in the background so writers never wait on file creation.
//
// File layout (`db-NNNNNN.db`, little-endian):
//
//   [0, 4096)        header: "PRDB" | u16 version | u32 file_id | u8 category |
//                    u32 containers | u64 container_capacity | u64 max_bytes | u32 crc32
//   container i      starts at 4096 + i * container_capacity
//   record           u32 body_len | u32 crc32(body) | body
//   body             u16 len | collection | u32 event_id | u32 writer | u64 sequence |
//                    u32 payload_len | payload
//
// A zero body_len ends a container. Commits are written ahead to
// `db-NNNNNN.jnl` (created under a temporary name and renamed into place):
//
//   "PRJ1" | u32 container | u64 offset | u32 nbytes | bytes | u32 crc32(everything before)
//
// On open, a complete journal is replayed and a temporary one is discarded,
// so a batch is either entirely visible or not at all.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "promptreco/bytes.hpp"
#include "promptreco/core.hpp"

namespace promptreco {

enum class Category : std::uint8_t { stream = 0, skim = 1, metadata = 2 };
std::string_view to_string(Category c);
Category category_from(std::string_view s);

struct ContainerId {
  std::uint32_t file = 0;
  std::uint32_t index = 0;
  friend auto operator<=>(const ContainerId&, const ContainerId&) = default;
};

using StoreClock = std::chrono::steady_clock;

struct ContainerLease {
  ContainerId container;
  Category category = Category::stream;
  std::uint32_t holder = 0;
  std::uint64_t lease_id = 0;
  StoreClock::time_point deadline;
};

struct StoredRecord {
  std::string collection;
  std::uint32_t event_id = 0;
  Bytes payload;
  std::uint32_t writer = 0;
  std::uint64_t sequence = 0;  // assigned by the store

  std::size_t encoded_size() const { return 8 + 2 + collection.size() + 4 + 4 + 8 + 4 + payload.size(); }
};

struct CommitReceipt {
  std::uint64_t commit_seq = 0;
  std::uint32_t written = 0;
  std::uint32_t duplicates = 0;
  std::uint64_t bytes = 0;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

class LeaseExpired : public StoreError {
 public:
  using StoreError::StoreError;
};

class CapacityError : public StoreError {
 public:
  CapacityError(std::uint64_t needed, std::uint64_t remaining);
  std::uint64_t needed() const { return needed_; }
  std::uint64_t remaining() const { return remaining_; }

 private:
  std::uint64_t needed_, remaining_;
};

class BackpressureError : public StoreError {
 public:
  BackpressureError(std::chrono::milliseconds retry_after);
  std::chrono::milliseconds retry_after() const { return retry_after_; }

 private:
  std::chrono::milliseconds retry_after_;
};

/// Thrown from inside commit_batch at an injected crash point. The store
/// object is unusable afterwards; reopen the directory to recover.
class SimulatedCrash : public StoreError {
 public:
  using StoreError::StoreError;
};

enum class CrashPoint { none, after_journal_temp, after_journal, mid_apply, after_apply };

struct StoreOptions {
  std::filesystem::path dir;
  std::uint64_t max_file_bytes = 4ull << 20;
  std::uint32_t containers_per_file = 16;
  double fill_threshold = 0.95;
  std::chrono::milliseconds lease_ttl{60'000};
  /// Pre-creation keeps at least 2x this many free containers per category.
  std::size_t active_clients = 8;
  bool background_precreate = true;
  std::chrono::milliseconds supply_wait{2'000};
  std::chrono::milliseconds supply_poll{2};
  std::function<StoreClock::time_point()> clock;
  std::function<void(const std::string&)> on_supply_alert;

  static StoreOptions from(const PipelineConfig& cfg, std::filesystem::path dir);
  std::size_t low_water() const { return 2 * active_clients; }
};

struct LockEvent {
  enum Kind : std::uint8_t { grant, release, revoke };
  std::uint64_t seq = 0;
  Kind kind = grant;
  ContainerId container;
  std::uint32_t holder = 0;
  std::uint64_t lease_id = 0;
};

struct DatabaseFileInfo {
  std::uint32_t id = 0;
  Category category = Category::stream;
  std::filesystem::path path;
  std::uint64_t max_bytes = 0;
  std::uint64_t bytes_used = 0;  // header plus used container bytes
  std::uint64_t allocated = 0;   // on-disk length
};

struct ContainerInfo {
  enum State : std::uint8_t { free, leased, full };
  ContainerId id;
  Category category = Category::stream;
  std::uint64_t capacity = 0;
  std::uint64_t used = 0;
  State state = free;
};

class EventStore {
 public:
  explicit EventStore(StoreOptions opts);
  ~EventStore();
  EventStore(const EventStore&) = delete;
  EventStore& operator=(const EventStore&) = delete;

  /// Clustering hint server: lease a free container of the category.
  ContainerLease request_container(Category category, std::uint32_t holder);

  /// All or nothing. Records whose (collection, event_id) is already stored
  /// are skipped, so replaying a batch leaves the store unchanged.
  CommitReceipt commit_batch(const ContainerLease& lease, std::span<const StoredRecord> records);

  /// Returns false (and logs) when the lease is no longer current.
  bool release(const ContainerLease& lease);
  /// Drops every lease a dead client holds.
  std::size_t release_holder(std::uint32_t holder);
  std::size_t expire_leases();

  void precreate(Category category, std::size_t containers);

  void declare_collections(std::span<const std::string> names);
  std::set<std::string> declared_collections() const;

  std::uint64_t container_capacity() const { return capacity_; }
  std::size_t free_count(Category category) const;
  std::vector<DatabaseFileInfo> files() const;
  std::vector<ContainerInfo> containers() const;
  std::vector<LockEvent> lock_log() const;
  std::uint64_t empty_inventory_events() const { return empty_inventory_events_.load(); }

  std::size_t record_count(std::string_view collection) const;
  std::size_t total_records() const;
  std::optional<StoredRecord> find(std::string_view collection, std::uint32_t event_id) const;
  std::vector<std::uint32_t> event_ids(std::string_view collection) const;
  std::vector<std::string> collections() const;

  void set_crash_point(CrashPoint p) { crash_point_ = p; }
  void set_active_clients(std::size_t n);

 private:
  struct Location {
    std::uint32_t file;
    std::uint64_t offset;
    std::uint32_t length;
  };
  struct Container {
    Category category;
    std::uint64_t used = 0;
    ContainerInfo::State state = ContainerInfo::free;
    std::optional<ContainerLease> lease;
  };
  struct DbFile {
    std::uint32_t id;
    Category category;
    std::filesystem::path path;
    int fd = -1;
    std::vector<Container> containers;
  };

  StoreClock::time_point now() const;
  std::uint64_t container_offset(std::uint32_t index) const;
  std::filesystem::path db_path(std::uint32_t id) const;
  std::filesystem::path journal_path(std::uint32_t id) const;

  void open_existing();
  void recover_journal(DbFile& f);
  void scan_file(DbFile& f);
  DbFile create_file(std::uint32_t id, Category category) const;
  void add_file_locked(DbFile f);
  void ensure_supply_locked(Category category);
  void background_loop();
  void expire_locked();
  void settle_locked(Container& c, ContainerId id);
  Container& container_locked(ContainerId id);
  void log_lock_locked(LockEvent::Kind kind, const ContainerLease& lease);
  void check_alive() const;

  StoreOptions opts_;
  std::uint64_t capacity_ = 0;

  mutable std::mutex mu_;
  std::condition_variable supply_cv_;
  std::condition_variable work_cv_;
  std::vector<DbFile> files_;
  std::map<Category, std::deque<ContainerId>> inventory_;
  std::set<Category> wanted_;
  std::uint32_t next_file_id_ = 1;
  std::uint64_t next_lease_id_ = 1;
  std::uint64_t next_commit_seq_ = 1;
  std::vector<LockEvent> lock_log_;
  std::unordered_map<std::string, std::unordered_map<std::uint32_t, Location>> index_;
  std::set<std::string> declared_;
  std::atomic<std::uint64_t> empty_inventory_events_{0};
  std::atomic<bool> crashed_{false};
  CrashPoint crash_point_ = CrashPoint::none;
  bool stop_ = false;
  std::thread precreator_;
};

struct ScanReport {
  std::size_t records = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Record-level checksum scan of one database file, independent of any open store.
ScanReport verify_database_file(const std::filesystem::path& path);

}  // namespace promptreco
