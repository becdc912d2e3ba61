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

// Network daemons for the event store and the conditions store, with the
// client ports workers use to reach them. Framing is the same as the
// logging manager's.
//
// Store messages:
//   LEASE_REQ  u8 category | u32 holder
//   LEASE      u32 file | u32 index | u8 category | u32 holder | u64 lease_id | u32 ttl_ms
//   COMMIT     u32 file | u32 index | u64 lease_id | u32 n | n * (str16 collection | u32 event | u32 writer | u32 len | bytes)
//   COMMIT_OK  u64 commit_seq | u32 written | u32 duplicates | u64 bytes
//   RELEASE    u32 file | u32 index | u64 lease_id
//   OK         u8 released
//   ERR        u16 code | str16 text | u64 a | u64 b
//
// Conditions messages:
//   LOOKUP     str16 federation | u32 run | u8 mode
//   CAL        u32 len | document
//   ERR        u16 code | str16 text

#pragma once

#include <set>

#include "promptreco/conditions.hpp"
#include "promptreco/evstore.hpp"
#include "promptreco/net.hpp"
#include "promptreco/worker.hpp"

namespace promptreco {

namespace store_wire {
enum Type : std::uint8_t { LEASE_REQ = 1, LEASE = 2, COMMIT = 3, COMMIT_OK = 4, RELEASE = 5, OK = 6, ERR = 7 };
enum Code : std::uint16_t { protocol = 1, lease_expired = 2, capacity = 3, backpressure = 4, store = 5 };
}  // namespace store_wire

namespace conditions_wire {
enum Type : std::uint8_t { LOOKUP = 1, CAL = 2, ERR = 3 };
enum Code : std::uint16_t { missing = 1, other = 2 };
}  // namespace conditions_wire

/// Leases held through a connection are released when it drops.
class StoreServer {
 public:
  StoreServer(EventStore& store, const Endpoint& ep);
  ~StoreServer();
  Endpoint endpoint() const { return server_.endpoint(); }
  void stop() { server_.stop(); }

 private:
  void handle(Socket& s);

  EventStore& store_;
  FrameServer server_;
};

class StoreClient : public StorePort {
 public:
  StoreClient(const Endpoint& ep, std::uint32_t holder);
  ContainerLease lease(Category category) override;
  CommitReceipt commit(const ContainerLease& lease, std::span<const StoredRecord> records) override;
  void release(const ContainerLease& lease) override;
  void crash() override { sock_.close(); }

 private:
  Frame call(std::uint8_t type, ByteView body);

  Socket sock_;
  std::uint32_t holder_;
};

class ConditionsServer {
 public:
  ConditionsServer(const ConditionsStore& store, const Endpoint& ep);
  Endpoint endpoint() const { return server_.endpoint(); }
  void stop() { server_.stop(); }

 private:
  void handle(Socket& s);

  const ConditionsStore& store_;
  FrameServer server_;
};

class ConditionsClient : public ConditionsPort {
 public:
  ConditionsClient(const Endpoint& ep, std::string federation);
  RollingCalibration lookup(RunId run, LookupMode mode) override;

 private:
  Socket sock_;
  std::string federation_;
};

}  // namespace promptreco
