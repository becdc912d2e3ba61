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

#include "promptreco/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace promptreco {

namespace {

std::string errno_text() { return std::strerror(errno); }

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (ep.host.empty() || ep.host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{}, *res = nullptr;
    hints.ai_family = AF_INET;
    if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res)
      throw NetError(fmt::format("cannot resolve host '{}'", ep.host));
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
  }
  return addr;
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw NetError(fmt::format("endpoint '{}' lacks a port", text));
  Endpoint ep;
  if (colon > 0) ep.host = std::string(text.substr(0, colon));
  auto port = text.substr(colon + 1);
  unsigned value = 0;
  auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc() || p != port.data() + port.size() || value > 65535)
    throw NetError(fmt::format("bad port in endpoint '{}'", text));
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

std::string Endpoint::str() const { return fmt::format("{}:{}", host, port); }

// -- Socket ----------------------------------------------------------------------

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_.exchange(-1);
  }
  return *this;
}

void Socket::shutdown() {
  int fd = fd_.load();
  if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
}

void Socket::close() {
  int fd = fd_.exchange(-1);
  if (fd >= 0) ::close(fd);
}

Socket Socket::connect(const Endpoint& ep) {
  auto addr = resolve(ep);
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw NetError(fmt::format("socket: {}", errno_text()));
  Socket s(fd);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw NetError(fmt::format("connect to {}: {}", ep.str(), errno_text()));
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

void Socket::send_all(ByteView data) {
  std::size_t off = 0;
  while (off < data.size()) {
    auto n = ::send(fd_.load(), data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetError(fmt::format("send: {}", errno_text()));
    }
    off += static_cast<std::size_t>(n);
  }
}

bool Socket::recv_exact(std::uint8_t* out, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    auto r = ::recv(fd_.load(), out + got, n - got, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw NetError(fmt::format("recv: {}", errno_text()));
    }
    if (r == 0) {
      if (got == 0) return false;
      throw NetError("connection closed mid-message");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void send_frame(Socket& s, std::uint8_t type, ByteView body) {
  if (body.size() + 1 > kMaxFrameBytes) throw NetError("frame too large");
  Bytes buf;
  buf.reserve(5 + body.size());
  ByteWriter w(buf);
  w.u32(static_cast<std::uint32_t>(body.size() + 1));
  w.u8(type);
  w.bytes(body);
  s.send_all(buf);
}

std::optional<Frame> recv_frame(Socket& s) {
  std::uint8_t head[5];
  if (!s.recv_exact(head, 4)) return std::nullopt;
  std::uint32_t len;
  std::memcpy(&len, head, 4);
  if (len == 0 || len > kMaxFrameBytes) throw NetError(fmt::format("bad frame length {}", len));
  if (!s.recv_exact(head + 4, 1)) throw NetError("connection closed mid-message");
  Frame f;
  f.type = head[4];
  f.body.resize(len - 1);
  if (len > 1 && !s.recv_exact(f.body.data(), f.body.size())) throw NetError("connection closed mid-message");
  return f;
}

// -- Listener --------------------------------------------------------------------

Listener::Listener(const Endpoint& ep) {
  auto addr = resolve(ep);
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw NetError(fmt::format("socket: {}", errno_text()));
  sock_ = Socket(fd);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw NetError(fmt::format("bind {}: {}", ep.str(), errno_text()));
  if (::listen(fd, 128) != 0) throw NetError(fmt::format("listen: {}", errno_text()));
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  bound_.host = ep.host.empty() ? "127.0.0.1" : ep.host;
  bound_.port = ntohs(addr.sin_port);
}

Listener::~Listener() { close(); }

std::optional<Socket> Listener::accept() {
  while (true) {
    int lfd = sock_.fd();
    if (lfd < 0) return std::nullopt;
    pollfd p{lfd, POLLIN, 0};
    int r = ::poll(&p, 1, 100);
    if (r < 0 && errno != EINTR) return std::nullopt;
    if (r <= 0) continue;
    int fd = ::accept4(lfd, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) continue;
      return std::nullopt;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return Socket(fd);
  }
}

void Listener::close() {
  sock_.shutdown();
  sock_.close();
}

// -- FrameServer -----------------------------------------------------------------

FrameServer::FrameServer(const Endpoint& ep, Handler handler) : listener_(ep), handler_(std::move(handler)) {
  acceptor_ = std::thread([this] { accept_loop(); });
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::accept_loop() {
  while (!stopping_) {
    auto s = listener_.accept();
    if (!s) break;
    std::lock_guard lock(mu_);
    if (stopping_) break;
    reap_locked();
    auto conn = std::make_unique<Conn>();
    conn->sock = std::move(*s);
    auto* c = conn.get();
    conns_.push_back(std::move(conn));
    c->thread = std::thread([this, c] {
      try {
        handler_(c->sock);
      } catch (const std::exception& e) {
        spdlog::debug("connection handler ended: {}", e.what());
      }
      c->sock.shutdown();
      c->finished = true;
    });
  }
}

void FrameServer::reap_locked() {
  for (auto it = conns_.begin(); it != conns_.end();) {
    if ((*it)->finished) {
      (*it)->thread.join();
      it = conns_.erase(it);
    } else {
      ++it;
    }
  }
}

void FrameServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.close();
  if (acceptor_.joinable()) acceptor_.join();
  std::lock_guard lock(mu_);
  for (auto& c : conns_) c->sock.shutdown();
  for (auto& c : conns_)
    if (c->thread.joinable()) c->thread.join();
  conns_.clear();
}

}  // namespace promptreco
