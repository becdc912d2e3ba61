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

#include "promptreco/services.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace promptreco {

namespace {

void send_error(Socket& s, std::uint8_t type, std::uint16_t code, std::string_view text, std::uint64_t a = 0,
                std::uint64_t b = 0) {
  ByteWriter w;
  w.u16(code);
  w.str16(text.substr(0, 60000));
  w.u64(a);
  w.u64(b);
  send_frame(s, type, w.view());
}

}  // namespace

// -- StoreServer -----------------------------------------------------------------

StoreServer::StoreServer(EventStore& store, const Endpoint& ep)
    : store_(store), server_(ep, [this](Socket& s) { handle(s); }) {}

StoreServer::~StoreServer() { server_.stop(); }

void StoreServer::handle(Socket& s) {
  using namespace store_wire;
  std::set<std::uint32_t> holders;
  struct Guard {
    EventStore& store;
    std::set<std::uint32_t>& holders;
    ~Guard() {
      for (auto h : holders) {
        try {
          store.release_holder(h);
        } catch (const std::exception& e) {
          spdlog::warn("store daemon: releasing holder {}: {}", h, e.what());
        }
      }
    }
  } guard{store_, holders};

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
        case LEASE_REQ: {
          auto cat = static_cast<Category>(r.u8());
          auto holder = r.u32();
          holders.insert(holder);
          auto l = store_.request_container(cat, holder);
          ByteWriter w;
          w.u32(l.container.file);
          w.u32(l.container.index);
          w.u8(static_cast<std::uint8_t>(l.category));
          w.u32(l.holder);
          w.u64(l.lease_id);
          auto ttl = std::chrono::duration_cast<std::chrono::milliseconds>(l.deadline - StoreClock::now()).count();
          w.u32(static_cast<std::uint32_t>(std::max<std::int64_t>(0, ttl)));
          send_frame(s, LEASE, w.view());
          break;
        }
        case COMMIT: {
          ContainerLease l;
          l.container.file = r.u32();
          l.container.index = r.u32();
          l.lease_id = r.u64();
          std::vector<StoredRecord> recs(r.u32());
          for (auto& rec : recs) {
            rec.collection = r.str16();
            rec.event_id = r.u32();
            rec.writer = r.u32();
            auto p = r.bytes(r.u32());
            rec.payload.assign(p.begin(), p.end());
          }
          auto receipt = store_.commit_batch(l, recs);
          ByteWriter w;
          w.u64(receipt.commit_seq);
          w.u32(receipt.written);
          w.u32(receipt.duplicates);
          w.u64(receipt.bytes);
          send_frame(s, COMMIT_OK, w.view());
          break;
        }
        case RELEASE: {
          ContainerLease l;
          l.container.file = r.u32();
          l.container.index = r.u32();
          l.lease_id = r.u64();
          ByteWriter w;
          w.u8(store_.release(l) ? 1 : 0);
          send_frame(s, OK, w.view());
          break;
        }
        default: send_error(s, ERR, protocol, fmt::format("unexpected message type {}", f->type)); return;
      }
    } catch (const LeaseExpired& e) {
      send_error(s, ERR, lease_expired, e.what());
    } catch (const CapacityError& e) {
      send_error(s, ERR, capacity, e.what(), e.needed(), e.remaining());
    } catch (const BackpressureError& e) {
      send_error(s, ERR, backpressure, e.what(), static_cast<std::uint64_t>(e.retry_after().count()));
    } catch (const NetError&) {
      return;
    } catch (const DecodeError& e) {
      send_error(s, ERR, protocol, e.what());
      return;
    } catch (const Error& e) {
      send_error(s, ERR, store, e.what());
    }
  }
}

// -- StoreClient -----------------------------------------------------------------

StoreClient::StoreClient(const Endpoint& ep, std::uint32_t holder) : sock_(Socket::connect(ep)), holder_(holder) {}

Frame StoreClient::call(std::uint8_t type, ByteView body) {
  using namespace store_wire;
  send_frame(sock_, type, body);
  auto f = recv_frame(sock_);
  if (!f) throw NetError("store daemon closed the connection");
  if (f->type == ERR) {
    ByteReader r(f->body);
    auto code = r.u16();
    auto text = r.str16();
    auto a = r.u64();
    auto b = r.u64();
    switch (code) {
      case lease_expired: throw LeaseExpired(text);
      case capacity: throw CapacityError(a, b);
      case backpressure: throw BackpressureError(std::chrono::milliseconds(a));
      case protocol: throw ProtocolError(text);
      default: throw StoreError(text);
    }
  }
  return std::move(*f);
}

ContainerLease StoreClient::lease(Category category) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(category));
  w.u32(holder_);
  auto f = call(store_wire::LEASE_REQ, w.view());
  ByteReader r(f.body);
  ContainerLease l;
  l.container.file = r.u32();
  l.container.index = r.u32();
  l.category = static_cast<Category>(r.u8());
  l.holder = r.u32();
  l.lease_id = r.u64();
  l.deadline = StoreClock::now() + std::chrono::milliseconds(r.u32());
  return l;
}

CommitReceipt StoreClient::commit(const ContainerLease& lease, std::span<const StoredRecord> records) {
  ByteWriter w;
  w.u32(lease.container.file);
  w.u32(lease.container.index);
  w.u64(lease.lease_id);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    w.str16(rec.collection);
    w.u32(rec.event_id);
    w.u32(rec.writer);
    w.u32(static_cast<std::uint32_t>(rec.payload.size()));
    w.bytes(rec.payload);
  }
  auto f = call(store_wire::COMMIT, w.view());
  ByteReader r(f.body);
  CommitReceipt c;
  c.commit_seq = r.u64();
  c.written = r.u32();
  c.duplicates = r.u32();
  c.bytes = r.u64();
  return c;
}

void StoreClient::release(const ContainerLease& lease) {
  ByteWriter w;
  w.u32(lease.container.file);
  w.u32(lease.container.index);
  w.u64(lease.lease_id);
  call(store_wire::RELEASE, w.view());
}

// -- conditions ------------------------------------------------------------------

ConditionsServer::ConditionsServer(const ConditionsStore& store, const Endpoint& ep)
    : store_(store), server_(ep, [this](Socket& s) { handle(s); }) {}

void ConditionsServer::handle(Socket& s) {
  using namespace conditions_wire;
  while (true) {
    std::optional<Frame> f;
    try {
      f = recv_frame(s);
    } catch (const NetError&) {
      return;
    }
    if (!f) return;
    auto fail = [&](Code code, std::string_view text) {
      ByteWriter w;
      w.u16(code);
      w.str16(text);
      send_frame(s, ERR, w.view());
    };
    if (f->type != LOOKUP) {
      fail(other, "expected LOOKUP");
      return;
    }
    try {
      ByteReader r(f->body);
      auto fed = r.str16();
      RunId run(r.u32());
      auto mode = r.u8() == 1 ? LookupMode::one_pass : LookupMode::two_pass;
      auto doc = store_.lookup(fed, run, mode).encode();
      ByteWriter w;
      w.u32(static_cast<std::uint32_t>(doc.size()));
      w.bytes(as_bytes(doc));
      send_frame(s, CAL, w.view());
    } catch (const ConditionsMissing& e) {
      fail(missing, e.what());
    } catch (const NetError&) {
      return;
    } catch (const Error& e) {
      fail(other, e.what());
    }
  }
}

ConditionsClient::ConditionsClient(const Endpoint& ep, std::string federation)
    : sock_(Socket::connect(ep)), federation_(std::move(federation)) {}

RollingCalibration ConditionsClient::lookup(RunId run, LookupMode mode) {
  using namespace conditions_wire;
  ByteWriter w;
  w.str16(federation_);
  w.u32(run.value());
  w.u8(mode == LookupMode::one_pass ? 1 : 0);
  send_frame(sock_, LOOKUP, w.view());
  auto f = recv_frame(sock_);
  if (!f) throw NetError("conditions daemon closed the connection");
  ByteReader r(f->body);
  if (f->type == ERR) {
    auto code = r.u16();
    auto text = r.str16();
    if (code == missing) throw ConditionsMissing(text);
    throw ConditionsError(text);
  }
  auto doc = r.bytes(r.u32());
  return RollingCalibration::decode(std::string_view(reinterpret_cast<const char*>(doc.data()), doc.size()));
}

}  // namespace promptreco
