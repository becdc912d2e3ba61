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

// TCP plumbing shared by the daemons.
//
// Every message is framed as u32 length (little-endian, counts the type byte
// and body) | u8 type | body.

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "promptreco/bytes.hpp"

namespace promptreco {

class NetError : public Error {
 public:
  using Error::Error;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(std::string_view text);  // "host:port" or ":port"
  std::string str() const;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& o) noexcept : fd_(o.fd_.exchange(-1)) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  static Socket connect(const Endpoint& ep);

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  /// Wakes any thread blocked on this socket; safe from other threads.
  void shutdown();
  void close();

  void send_all(ByteView data);
  /// False on orderly EOF before the first byte.
  bool recv_exact(std::uint8_t* out, std::size_t n);

 private:
  std::atomic<int> fd_{-1};
};

struct Frame {
  std::uint8_t type = 0;
  Bytes body;
};

constexpr std::size_t kMaxFrameBytes = 64u << 20;

void send_frame(Socket& s, std::uint8_t type, ByteView body);
/// nullopt when the peer closed the connection between frames.
std::optional<Frame> recv_frame(Socket& s);

class Listener {
 public:
  /// Port 0 picks an ephemeral port.
  explicit Listener(const Endpoint& ep);
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  Endpoint endpoint() const { return bound_; }
  /// Blocks until a connection arrives or close() is called.
  std::optional<Socket> accept();
  void close();

 private:
  Socket sock_;
  Endpoint bound_;
};

/// Accept loop with one thread per connection.
class FrameServer {
 public:
  using Handler = std::function<void(Socket&)>;

  FrameServer(const Endpoint& ep, Handler handler);
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  Endpoint endpoint() const { return listener_.endpoint(); }
  void stop();

 private:
  struct Conn {
    Socket sock;
    std::thread thread;
    std::atomic<bool> finished{false};
  };
  void accept_loop();
  void reap_locked();

  Listener listener_;
  Handler handler_;
  std::mutex mu_;
  std::list<std::unique_ptr<Conn>> conns_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
};

}  // namespace promptreco
