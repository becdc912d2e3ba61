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

#include "promptreco/evstore.hpp"

#include <fcntl.h>
#include <pthread.h>
#include <sched.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace promptreco {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kHeaderBytes = 4096;
constexpr std::uint16_t kDbVersion = 1;
constexpr std::size_t kHeaderFields = 4 + 2 + 4 + 1 + 4 + 8 + 8;

std::string errno_text() { return std::strerror(errno); }

void pwrite_all(int fd, const std::uint8_t* data, std::size_t n, std::uint64_t offset) {
  while (n > 0) {
    auto w = ::pwrite(fd, data, n, static_cast<off_t>(offset));
    if (w < 0) {
      if (errno == EINTR) continue;
      throw StoreError(fmt::format("pwrite failed: {}", errno_text()));
    }
    data += w;
    n -= static_cast<std::size_t>(w);
    offset += static_cast<std::uint64_t>(w);
  }
}

bool pread_all(int fd, std::uint8_t* data, std::size_t n, std::uint64_t offset) {
  while (n > 0) {
    auto r = ::pread(fd, data, n, static_cast<off_t>(offset));
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    data += r;
    n -= static_cast<std::size_t>(r);
    offset += static_cast<std::uint64_t>(r);
  }
  return true;
}

Bytes encode_record(const StoredRecord& r, std::uint64_t sequence) {
  ByteWriter body;
  body.str16(r.collection);
  body.u32(r.event_id);
  body.u32(r.writer);
  body.u64(sequence);
  body.u32(static_cast<std::uint32_t>(r.payload.size()));
  body.bytes(r.payload);
  ByteWriter out;
  out.u32(static_cast<std::uint32_t>(body.size()));
  out.u32(crc32(body.view()));
  out.bytes(body.view());
  return out.take();
}

StoredRecord decode_record_body(ByteView body) {
  ByteReader r(body);
  StoredRecord rec;
  rec.collection = r.str16();
  rec.event_id = r.u32();
  rec.writer = r.u32();
  rec.sequence = r.u64();
  auto n = r.u32();
  auto p = r.bytes(n);
  rec.payload.assign(p.begin(), p.end());
  if (r.remaining() != 0) throw DecodeError("trailing bytes in record body");
  return rec;
}

struct Header {
  std::uint32_t file_id;
  Category category;
  std::uint32_t containers;
  std::uint64_t capacity;
  std::uint64_t max_bytes;
};

Bytes encode_header(const Header& h) {
  ByteWriter w;
  w.bytes(as_bytes("PRDB"));
  w.u16(kDbVersion);
  w.u32(h.file_id);
  w.u8(static_cast<std::uint8_t>(h.category));
  w.u32(h.containers);
  w.u64(h.capacity);
  w.u64(h.max_bytes);
  w.u32(crc32(w.view()));
  return w.take();
}

Header read_header(int fd, const fs::path& path) {
  std::uint8_t raw[kHeaderFields + 4];
  if (!pread_all(fd, raw, sizeof raw, 0)) throw StoreError(fmt::format("{}: short header", path.string()));
  ByteReader r(ByteView(raw, sizeof raw));
  if (std::memcmp(raw, "PRDB", 4) != 0) throw StoreError(fmt::format("{}: bad magic", path.string()));
  r.bytes(4);
  if (r.u16() != kDbVersion) throw StoreError(fmt::format("{}: unsupported version", path.string()));
  Header h;
  h.file_id = r.u32();
  h.category = static_cast<Category>(r.u8());
  h.containers = r.u32();
  h.capacity = r.u64();
  h.max_bytes = r.u64();
  if (r.u32() != crc32(ByteView(raw, kHeaderFields)))
    throw StoreError(fmt::format("{}: header checksum mismatch", path.string()));
  return h;
}

}  // namespace

std::string_view to_string(Category c) {
  switch (c) {
    case Category::stream: return "stream";
    case Category::skim: return "skim";
    case Category::metadata: return "metadata";
  }
  return "?";
}

Category category_from(std::string_view s) {
  if (s == "stream") return Category::stream;
  if (s == "skim") return Category::skim;
  if (s == "metadata") return Category::metadata;
  throw StoreError(fmt::format("unknown container category '{}'", s));
}

CapacityError::CapacityError(std::uint64_t needed, std::uint64_t remaining)
    : StoreError(fmt::format("batch needs {} bytes, container has {} left", needed, remaining)),
      needed_(needed),
      remaining_(remaining) {}

BackpressureError::BackpressureError(std::chrono::milliseconds retry_after)
    : StoreError(fmt::format("no free containers, retry after {} ms", retry_after.count())), retry_after_(retry_after) {}

StoreOptions StoreOptions::from(const PipelineConfig& cfg, fs::path dir) {
  StoreOptions o;
  o.dir = std::move(dir);
  o.max_file_bytes = cfg.dbfile_max_bytes;
  o.containers_per_file = cfg.containers_per_file;
  o.fill_threshold = cfg.fill_threshold;
  o.lease_ttl = std::chrono::milliseconds(static_cast<std::int64_t>(cfg.lease_ttl_s * 1000));
  return o;
}

// -- lifecycle -------------------------------------------------------------------

EventStore::EventStore(StoreOptions opts) : opts_(std::move(opts)) {
  if (opts_.containers_per_file == 0) throw ConfigError("containers_per_file must be positive");
  if (opts_.max_file_bytes <= kHeaderBytes) throw ConfigError("database files must exceed the header size");
  capacity_ = (opts_.max_file_bytes - kHeaderBytes) / opts_.containers_per_file;
  if (capacity_ < 256) throw ConfigError("containers would be smaller than 256 bytes");
  fs::create_directories(opts_.dir);
  open_existing();
  {
    std::lock_guard lock(mu_);
    ensure_supply_locked(Category::stream);
    ensure_supply_locked(Category::skim);
  }
  if (opts_.background_precreate) precreator_ = std::thread([this] { background_loop(); });
}

EventStore::~EventStore() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  work_cv_.notify_all();
  supply_cv_.notify_all();
  if (precreator_.joinable()) precreator_.join();
  for (auto& f : files_)
    if (f.fd >= 0) ::close(f.fd);
}

StoreClock::time_point EventStore::now() const { return opts_.clock ? opts_.clock() : StoreClock::now(); }

std::uint64_t EventStore::container_offset(std::uint32_t index) const { return kHeaderBytes + index * capacity_; }

fs::path EventStore::db_path(std::uint32_t id) const { return opts_.dir / fmt::format("db-{:06}.db", id); }
fs::path EventStore::journal_path(std::uint32_t id) const { return opts_.dir / fmt::format("db-{:06}.jnl", id); }

void EventStore::check_alive() const {
  if (crashed_) throw StoreError("store crashed; reopen to recover");
}

void EventStore::open_existing() {
  std::vector<fs::path> dbs;
  for (const auto& e : fs::directory_iterator(opts_.dir)) {
    auto name = e.path().filename().string();
    if (name.ends_with(".jnl.tmp")) fs::remove(e.path());  // never renamed: the batch did not happen
    else if (name.starts_with("db-") && name.ends_with(".db")) dbs.push_back(e.path());
  }
  std::sort(dbs.begin(), dbs.end());
  for (const auto& p : dbs) {
    DbFile f;
    f.path = p;
    f.fd = ::open(p.c_str(), O_RDWR);
    if (f.fd < 0) throw StoreError(fmt::format("cannot open {}: {}", p.string(), errno_text()));
    auto h = read_header(f.fd, p);
    if (h.capacity != capacity_ || h.containers != opts_.containers_per_file)
      throw StoreError(fmt::format("{}: geometry differs from the store configuration", p.string()));
    f.id = h.file_id;
    f.category = h.category;
    f.containers.assign(h.containers, Container{h.category, 0, ContainerInfo::free, std::nullopt});
    recover_journal(f);
    scan_file(f);
    next_file_id_ = std::max(next_file_id_, f.id + 1);
    add_file_locked(std::move(f));
  }
  if (std::ifstream cat(opts_.dir / "collections.catalog"); cat) {
    std::string line;
    while (std::getline(cat, line))
      if (!line.empty()) declared_.insert(line);
  }
}

void EventStore::recover_journal(DbFile& f) {
  auto jp = journal_path(f.id);
  if (!fs::exists(jp)) return;
  std::ifstream in(jp, std::ios::binary);
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  try {
    if (data.size() < 4 + 4 + 8 + 4 + 4) throw DecodeError("short journal");
    ByteReader r(data);
    if (std::memcmp(r.bytes(4).data(), "PRJ1", 4) != 0) throw DecodeError("bad journal magic");
    auto container = r.u32();
    auto offset = r.u64();
    auto n = r.u32();
    auto bytes = r.bytes(n);
    auto crc = r.u32();
    if (crc != crc32(ByteView(data).first(data.size() - 4))) throw DecodeError("journal checksum mismatch");
    if (container >= f.containers.size() || offset < container_offset(container) ||
        offset + n > container_offset(container) + capacity_)
      throw DecodeError("journal entry outside its container");
    pwrite_all(f.fd, bytes.data(), bytes.size(), offset);
    spdlog::info("event store: replayed journal for {} ({} bytes)", f.path.filename().string(), n);
  } catch (const DecodeError& e) {
    spdlog::warn("event store: discarding journal {}: {}", jp.string(), e.what());
  }
  fs::remove(jp);
}

void EventStore::scan_file(DbFile& f) {
  for (std::uint32_t i = 0; i < f.containers.size(); ++i) {
    const auto base = container_offset(i);
    std::uint64_t pos = 0;
    while (pos + 8 <= capacity_) {
      std::uint8_t head[8];
      if (!pread_all(f.fd, head, 8, base + pos)) break;
      std::uint32_t len, crc;
      std::memcpy(&len, head, 4);
      std::memcpy(&crc, head + 4, 4);
      if (len == 0 || pos + 8 + len > capacity_) break;
      Bytes body(len);
      if (!pread_all(f.fd, body.data(), len, base + pos + 8) || crc32(body) != crc) {
        spdlog::warn("event store: {} container {} damaged at offset {}", f.path.filename().string(), i, pos);
        break;
      }
      try {
        auto rec = decode_record_body(body);
        index_[rec.collection].try_emplace(rec.event_id, Location{f.id, base + pos, 8 + len});
        next_commit_seq_ = std::max(next_commit_seq_, rec.sequence + 1);
      } catch (const DecodeError&) {
        break;
      }
      pos += 8 + len;
    }
    auto& c = f.containers[i];
    c.used = pos;
    c.state = static_cast<double>(pos) >= opts_.fill_threshold * static_cast<double>(capacity_) ? ContainerInfo::full
                                                                                                : ContainerInfo::free;
  }
}

EventStore::DbFile EventStore::create_file(std::uint32_t id, Category category) const {
  DbFile f;
  f.id = id;
  f.category = category;
  f.path = db_path(id);
  f.fd = ::open(f.path.c_str(), O_RDWR | O_CREAT | O_EXCL, 0644);
  if (f.fd < 0) throw StoreError(fmt::format("cannot create {}: {}", f.path.string(), errno_text()));
  // Full length up front; the unused space stays a hole.
  if (::ftruncate(f.fd, static_cast<off_t>(opts_.max_file_bytes)) != 0) {
    auto msg = errno_text();
    ::close(f.fd);
    fs::remove(f.path);
    throw StoreError(fmt::format("cannot size {}: {}", f.path.string(), msg));
  }
  auto h = encode_header({id, category, opts_.containers_per_file, capacity_, opts_.max_file_bytes});
  pwrite_all(f.fd, h.data(), h.size(), 0);
  f.containers.assign(opts_.containers_per_file, Container{category, 0, ContainerInfo::free, std::nullopt});
  return f;
}

void EventStore::add_file_locked(DbFile f) {
  auto& inv = inventory_[f.category];
  for (std::uint32_t i = 0; i < f.containers.size(); ++i)
    if (f.containers[i].state == ContainerInfo::free) inv.push_back({f.id, i});
  files_.push_back(std::move(f));
}

void EventStore::ensure_supply_locked(Category category) {
  const auto target = 2 * opts_.low_water();
  while (inventory_[category].size() < target) {
    try {
      add_file_locked(create_file(next_file_id_++, category));
    } catch (const StoreError& e) {
      if (opts_.on_supply_alert) opts_.on_supply_alert(e.what());
      throw;
    }
  }
}

void EventStore::background_loop() {
  // Batch class: a wake-up does not preempt the client that triggered it.
  sched_param sp{};
  pthread_setschedparam(pthread_self(), SCHED_BATCH, &sp);
  std::unique_lock lock(mu_);
  while (true) {
    // Inventory is polled so that a grant never pays for a wake-up; only an
    // empty inventory signals directly.
    work_cv_.wait_for(lock, opts_.supply_poll, [&] { return stop_ || !wanted_.empty(); });
    if (stop_) return;
    std::optional<Category> pick;
    if (!wanted_.empty()) pick = *wanted_.begin();
    for (const auto& [c, inv] : inventory_)
      if (!pick && inv.size() < opts_.low_water()) pick = c;
    if (!pick) continue;
    const auto category = *pick;
    const auto target = 2 * opts_.low_water();
    const auto have = inventory_[category].size();
    if (have >= target) {
      wanted_.erase(category);
      continue;
    }
    const auto n_files = (target - have + opts_.containers_per_file - 1) / opts_.containers_per_file;
    const auto first_id = next_file_id_;
    next_file_id_ += static_cast<std::uint32_t>(n_files);
    lock.unlock();
    std::vector<DbFile> made;
    std::string failure;
    for (std::size_t k = 0; k < n_files; ++k) {
      try {
        made.push_back(create_file(first_id + static_cast<std::uint32_t>(k), category));
      } catch (const StoreError& e) {
        failure = e.what();
        break;
      }
    }
    if (!failure.empty()) {
      spdlog::error("event store: pre-creation failed: {}", failure);
      if (opts_.on_supply_alert) opts_.on_supply_alert(failure);
    }
    lock.lock();
    for (auto& f : made) add_file_locked(std::move(f));
    wanted_.erase(category);
    supply_cv_.notify_all();
    if (!failure.empty()) {
      // Back off before trying again.
      lock.unlock();
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
      lock.lock();
    }
  }
}

// -- lock server -----------------------------------------------------------------

EventStore::Container& EventStore::container_locked(ContainerId id) {
  for (auto& f : files_)
    if (f.id == id.file) {
      if (id.index >= f.containers.size()) break;
      return f.containers[id.index];
    }
  throw StoreError(fmt::format("unknown container {}:{}", id.file, id.index));
}

void EventStore::log_lock_locked(LockEvent::Kind kind, const ContainerLease& lease) {
  lock_log_.push_back({lock_log_.size() + 1, kind, lease.container, lease.holder, lease.lease_id});
}

void EventStore::settle_locked(Container& c, ContainerId id) {
  if (static_cast<double>(c.used) >= opts_.fill_threshold * static_cast<double>(capacity_)) {
    c.state = ContainerInfo::full;
  } else {
    c.state = ContainerInfo::free;
    inventory_[c.category].push_front(id);
    supply_cv_.notify_all();
  }
}

void EventStore::expire_locked() {
  const auto t = now();
  for (auto& f : files_) {
    for (std::uint32_t i = 0; i < f.containers.size(); ++i) {
      auto& c = f.containers[i];
      if (c.lease && c.lease->deadline <= t) {
        log_lock_locked(LockEvent::revoke, *c.lease);
        spdlog::debug("event store: lease {} on {}:{} expired", c.lease->lease_id, f.id, i);
        c.lease.reset();
        settle_locked(c, {f.id, i});
      }
    }
  }
}

std::size_t EventStore::expire_leases() {
  std::lock_guard lock(mu_);
  auto before = lock_log_.size();
  expire_locked();
  return lock_log_.size() - before;
}

ContainerLease EventStore::request_container(Category category, std::uint32_t holder) {
  std::unique_lock lock(mu_);
  check_alive();
  expire_locked();
  auto& inv = inventory_[category];
  if (inv.empty()) {
    ++empty_inventory_events_;
    if (opts_.background_precreate) {
      wanted_.insert(category);
      work_cv_.notify_one();
      supply_cv_.wait_for(lock, opts_.supply_wait, [&] { return stop_ || !inv.empty(); });
    } else {
      try {
        ensure_supply_locked(category);
      } catch (const StoreError&) {
      }
    }
    if (inv.empty()) throw BackpressureError(std::chrono::milliseconds(100));
  }
  auto id = inv.front();
  inv.pop_front();
  auto& c = container_locked(id);
  ContainerLease lease{id, category, holder, next_lease_id_++, now() + opts_.lease_ttl};
  c.state = ContainerInfo::leased;
  c.lease = lease;
  log_lock_locked(LockEvent::grant, lease);

  if (!opts_.background_precreate && inv.size() < opts_.low_water()) ensure_supply_locked(category);
  return lease;
}

bool EventStore::release(const ContainerLease& lease) {
  std::lock_guard lock(mu_);
  check_alive();
  auto& c = container_locked(lease.container);
  if (!c.lease || c.lease->lease_id != lease.lease_id) {
    spdlog::warn("event store: release of stale lease {} on {}:{}", lease.lease_id, lease.container.file,
                 lease.container.index);
    return false;
  }
  log_lock_locked(LockEvent::release, *c.lease);
  c.lease.reset();
  settle_locked(c, lease.container);
  return true;
}

std::size_t EventStore::release_holder(std::uint32_t holder) {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (auto& f : files_) {
    for (std::uint32_t i = 0; i < f.containers.size(); ++i) {
      auto& c = f.containers[i];
      if (c.lease && c.lease->holder == holder) {
        log_lock_locked(LockEvent::release, *c.lease);
        c.lease.reset();
        settle_locked(c, {f.id, i});
        ++n;
      }
    }
  }
  return n;
}

void EventStore::precreate(Category category, std::size_t containers) {
  const auto n_files = (containers + opts_.containers_per_file - 1) / opts_.containers_per_file;
  std::lock_guard lock(mu_);
  for (std::size_t k = 0; k < n_files; ++k) {
    try {
      add_file_locked(create_file(next_file_id_++, category));
    } catch (const StoreError& e) {
      if (opts_.on_supply_alert) opts_.on_supply_alert(e.what());
      throw;
    }
  }
  supply_cv_.notify_all();
}

void EventStore::set_active_clients(std::size_t n) {
  std::lock_guard lock(mu_);
  opts_.active_clients = n;
  ensure_supply_locked(Category::stream);
  ensure_supply_locked(Category::skim);
}

// -- commits ---------------------------------------------------------------------

CommitReceipt EventStore::commit_batch(const ContainerLease& lease, std::span<const StoredRecord> records) {
  std::lock_guard lock(mu_);
  check_alive();
  expire_locked();
  auto& c = container_locked(lease.container);
  if (!c.lease || c.lease->lease_id != lease.lease_id)
    throw LeaseExpired(fmt::format("lease {} on {}:{} is not current", lease.lease_id, lease.container.file,
                                   lease.container.index));

  CommitReceipt receipt;
  receipt.commit_seq = next_commit_seq_;
  Bytes blob;
  std::vector<std::pair<const StoredRecord*, std::uint64_t>> placed;  // record, offset within blob
  std::set<std::pair<std::string_view, std::uint32_t>> in_batch;
  std::uint64_t seq = next_commit_seq_;
  for (const auto& r : records) {
    auto it = index_.find(r.collection);
    bool stored = it != index_.end() && it->second.count(r.event_id);
    if (stored || !in_batch.emplace(r.collection, r.event_id).second) {
      ++receipt.duplicates;
      continue;
    }
    auto enc = encode_record(r, seq++);
    placed.emplace_back(&r, blob.size());
    blob.insert(blob.end(), enc.begin(), enc.end());
  }
  const auto remaining = capacity_ - c.used;
  if (blob.size() > remaining) throw CapacityError(blob.size(), remaining);
  receipt.written = static_cast<std::uint32_t>(placed.size());
  receipt.bytes = blob.size();
  if (blob.empty()) return receipt;

  auto& file = *std::find_if(files_.begin(), files_.end(), [&](const DbFile& f) { return f.id == lease.container.file; });
  const auto offset = container_offset(lease.container.index) + c.used;
  auto crash = [&](CrashPoint p) {
    if (crash_point_ == p) {
      crashed_ = true;
      throw SimulatedCrash(fmt::format("injected crash in commit ({})", static_cast<int>(p)));
    }
  };

  {
    ByteWriter j;
    j.bytes(as_bytes("PRJ1"));
    j.u32(lease.container.index);
    j.u64(offset);
    j.u32(static_cast<std::uint32_t>(blob.size()));
    j.bytes(blob);
    j.u32(crc32(j.view()));
    auto tmp = journal_path(file.id);
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(j.view().data()), static_cast<std::streamsize>(j.size()));
      if (!out) throw StoreError(fmt::format("cannot write journal {}", tmp.string()));
    }
    crash(CrashPoint::after_journal_temp);
    fs::rename(tmp, journal_path(file.id));
  }
  crash(CrashPoint::after_journal);
  if (crash_point_ == CrashPoint::mid_apply) {
    pwrite_all(file.fd, blob.data(), blob.size() / 2, offset);
    crash(CrashPoint::mid_apply);
  }
  pwrite_all(file.fd, blob.data(), blob.size(), offset);
  crash(CrashPoint::after_apply);
  fs::remove(journal_path(file.id));

  for (const auto& [rec, at] : placed) {
    auto len = static_cast<std::uint32_t>(rec->encoded_size());
    index_[rec->collection].emplace(rec->event_id, Location{file.id, offset + at, len});
  }
  c.used += blob.size();
  next_commit_seq_ = seq;
  return receipt;
}

// -- catalog and queries ---------------------------------------------------------

void EventStore::declare_collections(std::span<const std::string> names) {
  std::lock_guard lock(mu_);
  check_alive();
  std::ofstream out(opts_.dir / "collections.catalog", std::ios::app);
  for (const auto& n : names)
    if (declared_.insert(n).second) out << n << '\n';
  if (!out) throw StoreError("cannot append to the collection catalog");
}

std::set<std::string> EventStore::declared_collections() const {
  std::lock_guard lock(mu_);
  return declared_;
}

std::size_t EventStore::free_count(Category category) const {
  std::lock_guard lock(mu_);
  auto it = inventory_.find(category);
  return it == inventory_.end() ? 0 : it->second.size();
}

std::vector<DatabaseFileInfo> EventStore::files() const {
  std::lock_guard lock(mu_);
  std::vector<DatabaseFileInfo> out;
  for (const auto& f : files_) {
    DatabaseFileInfo info{f.id, f.category, f.path, opts_.max_file_bytes, kHeaderBytes, 0};
    for (const auto& c : f.containers) info.bytes_used += c.used;
    struct stat st {};
    if (::fstat(f.fd, &st) == 0) info.allocated = static_cast<std::uint64_t>(st.st_size);
    out.push_back(info);
  }
  return out;
}

std::vector<ContainerInfo> EventStore::containers() const {
  std::lock_guard lock(mu_);
  std::vector<ContainerInfo> out;
  for (const auto& f : files_)
    for (std::uint32_t i = 0; i < f.containers.size(); ++i) {
      const auto& c = f.containers[i];
      out.push_back({{f.id, i}, c.category, capacity_, c.used, c.state});
    }
  return out;
}

std::vector<LockEvent> EventStore::lock_log() const {
  std::lock_guard lock(mu_);
  return lock_log_;
}

std::size_t EventStore::record_count(std::string_view collection) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(std::string(collection));
  return it == index_.end() ? 0 : it->second.size();
}

std::size_t EventStore::total_records() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [_, m] : index_) n += m.size();
  return n;
}

std::optional<StoredRecord> EventStore::find(std::string_view collection, std::uint32_t event_id) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(std::string(collection));
  if (it == index_.end()) return std::nullopt;
  auto jt = it->second.find(event_id);
  if (jt == it->second.end()) return std::nullopt;
  const auto& loc = jt->second;
  auto f = std::find_if(files_.begin(), files_.end(), [&](const DbFile& d) { return d.id == loc.file; });
  Bytes raw(loc.length);
  if (!pread_all(f->fd, raw.data(), raw.size(), loc.offset)) throw StoreError("short read of stored record");
  return decode_record_body(ByteView(raw).subspan(8));
}

std::vector<std::uint32_t> EventStore::event_ids(std::string_view collection) const {
  std::lock_guard lock(mu_);
  std::vector<std::uint32_t> out;
  if (auto it = index_.find(std::string(collection)); it != index_.end())
    for (const auto& [id, _] : it->second) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> EventStore::collections() const {
  std::lock_guard lock(mu_);
  std::set<std::string> names(declared_.begin(), declared_.end());
  for (const auto& [n, m] : index_)
    if (!m.empty()) names.insert(n);
  return {names.begin(), names.end()};
}

ScanReport verify_database_file(const fs::path& path) {
  ScanReport report;
  int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) {
    report.problems.push_back(fmt::format("cannot open: {}", errno_text()));
    return report;
  }
  try {
    auto h = read_header(fd, path);
    struct stat st {};
    ::fstat(fd, &st);
    if (static_cast<std::uint64_t>(st.st_size) > h.max_bytes)
      report.problems.push_back(fmt::format("file length {} exceeds maximum {}", st.st_size, h.max_bytes));
    for (std::uint32_t i = 0; i < h.containers; ++i) {
      const auto base = kHeaderBytes + i * h.capacity;
      std::uint64_t pos = 0;
      while (pos + 8 <= h.capacity) {
        std::uint8_t head[8];
        if (!pread_all(fd, head, 8, base + pos)) break;
        std::uint32_t len, crc;
        std::memcpy(&len, head, 4);
        std::memcpy(&crc, head + 4, 4);
        if (len == 0) break;
        if (pos + 8 + len > h.capacity) {
          report.problems.push_back(fmt::format("container {} offset {}: record overruns container", i, pos));
          break;
        }
        Bytes body(len);
        if (!pread_all(fd, body.data(), len, base + pos + 8) || crc32(body) != crc) {
          report.problems.push_back(fmt::format("container {} offset {}: record checksum mismatch", i, pos));
          break;
        }
        ++report.records;
        pos += 8 + len;
      }
    }
  } catch (const StoreError& e) {
    report.problems.push_back(e.what());
  }
  ::close(fd);
  return report;
}

}  // namespace promptreco
