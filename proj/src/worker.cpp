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

#include "promptreco/worker.hpp"

#include <thread>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace promptreco {

namespace {

struct WorkerCrash {
  FaultPoint point;
  std::uint32_t event_id;
};

constexpr std::uint32_t kRecoMagic = 0x4f434552;  // "RECO"

}  // namespace

bool filter(const EventRecord& e, double accept_fraction) {
  if (accept_fraction >= 1.0) return true;
  // Compare against fraction * 2^64 in integer space.
  const auto h = hash64(e.run.value(), e.event_id);
  const auto limit = static_cast<std::uint64_t>(std::ldexp(accept_fraction, 64));
  return h < limit;
}

Bytes RecoOutput::serialize(std::size_t target_bytes) const {
  ByteWriter body;
  body.u32(kRecoMagic);
  body.u32(run.value());
  body.u32(event_id);
  body.u32(tag);
  body.u16(static_cast<std::uint16_t>(corrected.size()));
  for (double v : corrected) body.f64(v);
  body.u16(static_cast<std::uint16_t>(raw.size()));
  for (double v : raw) body.f64(v);
  body.u16(static_cast<std::uint16_t>(stream_set.size()));
  for (const auto& s : stream_set) body.str16(s);
  body.u16(static_cast<std::uint16_t>(skim_set.size()));
  for (const auto& s : skim_set) body.str16(s);
  body.str16(calib_version);
  body.u32(calib_validity.value());
  ByteWriter out;
  out.u32(static_cast<std::uint32_t>(body.size()));
  out.bytes(body.view());
  if (out.size() < target_bytes) out.zeros(target_bytes - out.size());
  return out.take();
}

RecoOutput RecoOutput::deserialize(ByteView data) {
  ByteReader outer(data);
  auto len = outer.u32();
  ByteReader r(outer.bytes(len));
  if (r.u32() != kRecoMagic) throw DecodeError("not a reconstructed event record");
  RecoOutput o;
  o.run = RunId(r.u32());
  o.event_id = r.u32();
  o.tag = r.u32();
  o.corrected.resize(r.u16());
  for (auto& v : o.corrected) v = r.f64();
  o.raw.resize(r.u16());
  for (auto& v : o.raw) v = r.f64();
  o.stream_set.resize(r.u16());
  for (auto& s : o.stream_set) s = r.str16();
  o.skim_set.resize(r.u16());
  for (auto& s : o.skim_set) s = r.str16();
  o.calib_version = r.str16();
  o.calib_validity = RunId(r.u32());
  return o;
}

RecoOutput reconstruct(const EventRecord& e, const RollingCalibration& cal) {
  if (cal.constants.size() < e.readings.size())
    throw ConfigError(fmt::format("calibration {} covers {} subsystems, event has {}", cal.version,
                                  cal.constants.size(), e.readings.size()));
  RecoOutput o;
  o.run = e.run;
  o.event_id = e.event_id;
  o.calib_version = cal.version;
  o.calib_validity = cal.validity_start;
  std::uint32_t low = 0;
  for (std::size_t k = 0; k < e.readings.size(); ++k) {
    const auto& c = cal.constants[k];
    double x = (e.readings[k].value - c.pedestal) / c.gain;
    o.corrected.push_back(x);
    o.raw.push_back(e.readings[k].value);
    if (k < 8 && x > 5.0) low |= 1u << k;
  }
  o.tag = (e.tag_bits & ~0xffu) | low;
  return o;
}

void assign_streams(RecoOutput& out, const StreamRegistry& registry) {
  out.stream_set.clear();
  out.skim_set.clear();
  for (std::size_t i = 0; i < registry.streams().size(); ++i)
    if (registry.stream_matches(i, out.tag)) out.stream_set.push_back(registry.streams()[i].name);
  for (std::size_t i = 0; i < registry.skims().size(); ++i)
    if (registry.skim_matches(i, out.tag)) out.skim_set.push_back(registry.skims()[i].name);
}

Bytes skim_pointer(std::string_view parent_collection, std::uint32_t event_id) {
  ByteWriter w;
  w.str16(parent_collection);
  w.u32(event_id);
  return w.take();
}

// -- CommitBuffer ----------------------------------------------------------------

CommitBuffer::CommitBuffer(std::uint64_t cache_bytes, double interval_s, double jitter_fraction, std::uint64_t seed)
    : cache_bytes_(cache_bytes), interval_s_(interval_s), jitter_(jitter_fraction), rng_(seed) {}

double CommitBuffer::draw_interval() {
  std::uniform_real_distribution<double> u(1.0 - jitter_, 1.0 + jitter_);
  return interval_s_ * u(rng_);
}

void CommitBuffer::start(double now) {
  last_commit_ = now;
  deadline_ = now + draw_interval();
}

void CommitBuffer::add(PendingEvent e) {
  bytes_ += e.bytes;
  pending_.push_back(std::move(e));
}

bool CommitBuffer::should_flush(double now) const { return bytes_ >= cache_bytes_ || now >= deadline_; }

std::vector<PendingEvent> CommitBuffer::take(double now) {
  std::vector<PendingEvent> out;
  out.swap(pending_);
  bytes_ = 0;
  start(now);
  return out;
}

// -- ports -----------------------------------------------------------------------

LocalLm::LocalLm(LoggingManager& lm, std::uint32_t worker) : lm_(lm), worker_(worker) { lm_.hello(worker_); }

LocalLm::~LocalLm() {
  if (!gone_) lm_.disconnect(worker_);
}

void LocalLm::crash() {
  if (!gone_) lm_.disconnect(worker_);
  gone_ = true;
}

LmClient::LmClient(const Endpoint& ep, std::uint32_t worker) : sock_(Socket::connect(ep)) {
  ByteWriter w;
  w.u32(worker);
  send_frame(sock_, lm_wire::HELLO, w.view());
}

LmReply LmClient::next() {
  using namespace lm_wire;
  send_frame(sock_, NEXT, {});
  auto f = recv_frame(sock_);
  if (!f) throw NetError("logging manager closed the connection");
  ByteReader r(f->body);
  LmReply reply;
  switch (f->type) {
    case ASSIGN: {
      reply.kind = DeliveryLedger::Next::assign;
      reply.attempt = r.u32();
      RunId run(r.u32());
      auto frame = r.bytes(r.remaining());
      reply.frame.assign(frame.begin(), frame.end());
      reply.event = decode_frame(reply.frame, run);
      break;
    }
    case WAIT:
      reply.kind = DeliveryLedger::Next::wait;
      reply.retry_after = std::chrono::milliseconds(r.u32());
      break;
    case EOR: reply.kind = DeliveryLedger::Next::end; break;
    case ERR: {
      r.u16();
      throw ProtocolError(fmt::format("logging manager: {}", r.str16()));
    }
    default: throw ProtocolError(fmt::format("unexpected reply type {}", f->type));
  }
  return reply;
}

void LmClient::processed(std::uint32_t id, bool filtered) {
  ByteWriter w;
  w.u32(id);
  w.u8(filtered ? 1 : 0);
  send_frame(sock_, lm_wire::PROCESSED, w.view());
}

void LmClient::committed(std::span<const std::uint32_t> ids) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(ids.size()));
  for (auto id : ids) w.u32(id);
  send_frame(sock_, lm_wire::COMMITTED, w.view());
}

// -- worker loop -----------------------------------------------------------------

std::string_view to_string(FaultPoint p) {
  switch (p) {
    case FaultPoint::after_assign: return "after_assign";
    case FaultPoint::after_processed: return "after_processed";
    case FaultPoint::mid_store_commit: return "mid_store_commit";
    case FaultPoint::after_store_commit: return "after_store_commit";
    case FaultPoint::after_lm_commit: return "after_lm_commit";
  }
  return "?";
}

std::vector<std::string> collection_names(const StreamRegistry& registry, std::string_view release, bool production,
                                          std::uint32_t version, RunId run, const NamingScheme& scheme) {
  std::vector<std::string> out;
  for (const auto& label : registry.collection_labels())
    out.push_back(make_collection_name(collection_for(label, release, production, version, run), registry, scheme));
  return out;
}

namespace {

class WorkerLoop {
 public:
  WorkerLoop(WorkerContext& ctx, LmPort& lm, StorePort& store, ConditionsPort& conditions)
      : ctx_(ctx),
        lm_(lm),
        store_(store),
        conditions_(conditions),
        buffer_(ctx.config.commit_cache_bytes, ctx.config.commit_interval_s, ctx.config.jitter_fraction,
                hash64(ctx.seed, ctx.worker_id)),
        t0_(std::chrono::steady_clock::now()) {
    const auto labels = ctx.registry.collection_labels();
    if (ctx.collections.size() != labels.size())
      throw ConfigError(fmt::format("worker needs {} collection names, got {}", labels.size(), ctx.collections.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) by_label_[labels[i]] = ctx.collections[i];
    summary_.worker = ctx.worker_id;
  }

  WorkerSummary run() {
    buffer_.start(now());
    try {
      loop();
    } catch (const WorkerCrash& c) {
      spdlog::debug("worker {}: injected crash at {} (event {})", ctx_.worker_id, to_string(c.point), c.event_id);
      summary_.crashed = true;
      die();
    } catch (const std::exception& e) {
      spdlog::warn("worker {}: {}", ctx_.worker_id, e.what());
      summary_.error = e.what();
      die();
    }
    return summary_;
  }

 private:
  double now() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

  void fault(FaultPoint p, std::uint32_t event_id) {
    if (ctx_.faults.crash_at && ctx_.faults.crash_at(p, event_id)) throw WorkerCrash{p, event_id};
  }

  void die() {
    try {
      lm_.crash();
    } catch (...) {
    }
    try {
      store_.crash();
    } catch (...) {
    }
  }

  void loop() {
    while (true) {
      if (!buffer_.empty() && buffer_.should_flush(now())) flush();
      auto reply = lm_.next();
      if (reply.kind == DeliveryLedger::Next::wait) {
        if (!buffer_.empty()) flush();
        std::this_thread::sleep_for(reply.retry_after);
        continue;
      }
      if (reply.kind == DeliveryLedger::Next::end) {
        if (!buffer_.empty()) flush();
        return;
      }
      handle(reply.event);
    }
  }

  void handle(const EventRecord& e) {
    ++summary_.assigned;
    fault(FaultPoint::after_assign, e.event_id);
    if (ctx_.faults.poison.count(e.event_id)) throw WorkerCrash{FaultPoint::after_assign, e.event_id};
    if (!cal_) {
      cal_ = conditions_.lookup(e.run, ctx_.mode);
      summary_.calib_version = cal_->version;
      summary_.calib_validity = cal_->validity_start;
    }
    const bool accepted = filter(e, ctx_.config.accept_fraction);
    if (accepted) {
      auto out = reconstruct(e, *cal_);
      assign_streams(out, ctx_.registry);
      buffer_.add(records_for(out));
      ++summary_.accepted;
    } else {
      ++summary_.filtered;
    }
    lm_.processed(e.event_id, !accepted);
    if (ctx_.processed_counter) ctx_.processed_counter->fetch_add(1, std::memory_order_relaxed);
    fault(FaultPoint::after_processed, e.event_id);
    if (buffer_.bytes_used() >= ctx_.config.commit_cache_bytes) flush();
  }

  PendingEvent records_for(const RecoOutput& out) {
    PendingEvent p;
    p.event_id = out.event_id;
    auto payload = out.serialize(ctx_.config.output_bytes_per_event);
    for (const auto& s : out.stream_set) {
      StoredRecord r{by_label_.at(s), out.event_id, payload, ctx_.worker_id, 0};
      p.bytes += r.encoded_size();
      p.stream_records.push_back(std::move(r));
    }
    for (const auto& k : out.skim_set) {
      const auto& skim = *std::find_if(ctx_.registry.skims().begin(), ctx_.registry.skims().end(),
                                       [&](const Skim& s) { return s.name == k; });
      const auto& parent = by_label_.at(ctx_.registry.streams()[skim.parent].name);
      StoredRecord r{by_label_.at(k), out.event_id, skim_pointer(parent, out.event_id), ctx_.worker_id, 0};
      p.bytes += r.encoded_size();
      p.skim_records.push_back(std::move(r));
    }
    return p;
  }

  void flush() {
    auto events = buffer_.take(now());
    if (events.empty()) return;
    std::vector<StoredRecord> streams, skims;
    std::vector<std::uint32_t> ids;
    for (auto& e : events) {
      ids.push_back(e.event_id);
      std::move(e.stream_records.begin(), e.stream_records.end(), std::back_inserter(streams));
      std::move(e.skim_records.begin(), e.skim_records.end(), std::back_inserter(skims));
    }
    std::vector<ContainerLease> leases;
    commit_all(Category::stream, streams, leases);
    fault(FaultPoint::mid_store_commit, ids.front());
    commit_all(Category::skim, skims, leases);
    fault(FaultPoint::after_store_commit, ids.front());
    lm_.committed(ids);
    for (const auto& l : leases) store_.release(l);
    summary_.committed += ids.size();
    ++summary_.flushes;
    summary_.commit_times.push_back(now());
    fault(FaultPoint::after_lm_commit, ids.front());
  }

  void backoff(int& attempts, std::chrono::milliseconds wait, const char* what) {
    if (++attempts > ctx_.store_retries) throw StoreError(fmt::format("giving up on the event store: {}", what));
    std::this_thread::sleep_for(wait);
  }

  // Commits `records` through as many leases as it takes. A batch that does
  // not fit commits the prefix that does and continues in a fresh container.
  void commit_all(Category category, std::span<const StoredRecord> records, std::vector<ContainerLease>& leases) {
    std::size_t pos = 0;
    std::optional<ContainerLease> lease;
    int attempts = 0, empty_handed = 0;
    while (pos < records.size()) {
      try {
        if (!lease) {
          lease = store_.lease(category);
          leases.push_back(*lease);
        }
        auto rest = records.subspan(pos);
        auto receipt = store_.commit(*lease, rest);
        summary_.records_written += receipt.written;
        summary_.duplicates_skipped += receipt.duplicates;
        pos = records.size();
      } catch (const CapacityError& e) {
        auto rest = records.subspan(pos);
        std::size_t fit = 0;
        std::uint64_t bytes = 0;
        while (fit < rest.size() && bytes + rest[fit].encoded_size() <= e.remaining()) bytes += rest[fit++].encoded_size();
        if (fit == 0 && ++empty_handed > 8) throw StoreError("records do not fit any container");
        if (fit > 0) {
          empty_handed = 0;
          auto receipt = store_.commit(*lease, rest.first(fit));
          summary_.records_written += receipt.written;
          summary_.duplicates_skipped += receipt.duplicates;
          pos += fit;
        }
        lease.reset();
      } catch (const LeaseExpired&) {
        lease.reset();
        backoff(attempts, std::chrono::milliseconds(0), "lease keeps expiring");
      } catch (const BackpressureError& e) {
        backoff(attempts, e.retry_after(), e.what());
      } catch (const SimulatedCrash&) {
        throw;
      } catch (const StoreError& e) {
        lease.reset();
        backoff(attempts, ctx_.store_backoff, e.what());
      }
    }
  }

  WorkerContext& ctx_;
  LmPort& lm_;
  StorePort& store_;
  ConditionsPort& conditions_;
  CommitBuffer buffer_;
  std::chrono::steady_clock::time_point t0_;
  std::unordered_map<std::string, std::string> by_label_;
  std::optional<RollingCalibration> cal_;
  WorkerSummary summary_;
};

}  // namespace

WorkerSummary run_worker(WorkerContext ctx, LmPort& lm, StorePort& store, ConditionsPort& conditions) {
  WorkerLoop loop(ctx, lm, store, conditions);
  return loop.run();
}

}  // namespace promptreco
