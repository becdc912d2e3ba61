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

#include "promptreco/bytes.hpp"

#include <algorithm>
#include <fstream>
#include <memory>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <zlib.h>

namespace promptreco {

std::uint32_t crc32(ByteView data) { return crc32(data, 0); }

std::uint32_t crc32(ByteView data, std::uint32_t running) {
  uLong crc = running;
  // zlib takes uInt lengths; feed in chunks.
  const std::uint8_t* p = data.data();
  std::size_t n = data.size();
  while (n > 0) {
    uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx_.get(), p, n); }
  Digest finish() {
    Digest d{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), d.data(), &len);
    return d;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx_;
};

}  // namespace

Digest file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot read '{}'", path.string()));
  Sha256 sha;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (auto got = in.gcount(); got > 0) sha.update(buf.data(), static_cast<std::size_t>(got));
  }
  if (in.bad()) throw Error(fmt::format("I/O error reading '{}'", path.string()));
  return sha.finish();
}

Digest digest_bytes(ByteView data) {
  Sha256 sha;
  sha.update(data.data(), data.size());
  return sha.finish();
}

std::string to_hex(const Digest& d) {
  std::string out;
  out.reserve(64);
  for (auto b : d) out += fmt::format("{:02x}", b);
  return out;
}

Digest digest_from_hex(std::string_view hex) {
  if (hex.size() != 64) throw DecodeError(fmt::format("digest must be 64 hex characters, got {}", hex.size()));
  Digest d{};
  for (std::size_t i = 0; i < 32; ++i) {
    auto nib = [&](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      throw DecodeError("bad hex digit in digest");
    };
    d[i] = static_cast<std::uint8_t>(nib(hex[2 * i]) << 4 | nib(hex[2 * i + 1]));
  }
  return d;
}

void ByteWriter::str16(std::string_view s) {
  if (s.size() > 0xffff) throw Error("string too long for 16-bit length prefix");
  u16(static_cast<std::uint16_t>(s.size()));
  bytes(as_bytes(s));
}

ByteView ByteReader::bytes(std::size_t n) {
  need(n);
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::str16() {
  auto n = u16();
  auto b = bytes(n);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n)
    throw DecodeError(fmt::format("truncated input: need {} bytes at offset {}, have {}", n, pos_, data_.size() - pos_));
}

}  // namespace promptreco
