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

#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace promptreco {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NamingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The request contradicts current state (an active attempt, a running run).
class ConflictError : public Error {
 public:
  using Error::Error;
};

/// Collider run number. Rendered as exactly eight decimal digits.
class RunId {
 public:
  static constexpr std::uint32_t kMax = 99'999'999;

  RunId() = default;
  explicit RunId(std::uint32_t value);

  std::uint32_t value() const { return value_; }
  std::string str() const;

  friend auto operator<=>(const RunId&, const RunId&) = default;

 private:
  std::uint32_t value_ = 1;
};

/// A physics output category. Physical streams hold full event records;
/// skims are pointer collections selecting a subset of one parent stream.
///
/// Membership is a predicate over reconstructed tag bits: an event matches
/// when every bit of `mask` is set.
struct Stream {
  std::string name;
  std::uint32_t mask = 0;
};

struct Skim {
  std::string name;
  std::size_t parent = 0;  // index into physical streams
  std::uint32_t mask = 0;
};

class StreamRegistry {
 public:
  StreamRegistry() = default;
  StreamRegistry(std::vector<Stream> streams, std::vector<Skim> skims);

  /// Four physical streams (AllEvents first) and 111 pointer skims.
  static StreamRegistry standard();

  const std::vector<Stream>& streams() const { return streams_; }
  const std::vector<Skim>& skims() const { return skims_; }
  std::size_t collections_per_run() const { return streams_.size() + skims_.size(); }

  bool contains(std::string_view name) const;
  bool stream_matches(std::size_t stream, std::uint32_t tag) const;
  /// True only when the parent stream also matches.
  bool skim_matches(std::size_t skim, std::uint32_t tag) const;

  /// Every stream then every skim name, in registry order.
  std::vector<std::string> collection_labels() const;

 private:
  std::vector<Stream> streams_;
  std::vector<Skim> skims_;
};

std::string lowercase(std::string_view s);

struct CollectionName {
  std::string stream;
  std::string release;
  bool production = true;
  std::uint32_t version = 0;  // zero-based attempt index, "V06" is the 7th processing
  RunId run;
  std::string leaf;

  friend bool operator==(const CollectionName&, const CollectionName&) = default;
};

/// Literal path segments that the naming scheme carries without interpretation.
struct NamingScheme {
  std::string release_suffix = "fb";
  std::string cluster_segment = "cb001";
};

std::string make_collection_name(const CollectionName& c, const StreamRegistry& registry,
                                 const NamingScheme& scheme = {});
CollectionName parse_collection_name(std::string_view path, const StreamRegistry& registry,
                                     const NamingScheme& scheme = {});

/// Convenience for the common case: leaf is the lowercased stream label.
CollectionName collection_for(std::string_view stream, std::string_view release, bool production,
                              std::uint32_t version, RunId run);

/// Tunables shared by every daemon. Sizes in bytes, times in seconds.
struct PipelineConfig {
  double accept_fraction = 0.375;
  std::uint32_t event_payload_bytes = 1024;
  std::uint32_t output_bytes_per_event = 512;
  std::uint64_t dbfile_max_bytes = 4ull << 20;
  double sample_interval_s = 1.0;
  std::uint64_t calib_min_samples = 500;
  std::uint32_t killer_threshold = 1;
  double commit_interval_s = 2.0;
  std::uint64_t commit_cache_bytes = 64 * 1024;
  double jitter_fraction = 0.5;
  double lease_ttl_s = 60.0;
  double fill_threshold = 0.95;
  std::uint32_t containers_per_file = 16;

  void validate() const;
  void set(std::string_view key, std::string_view value);
  std::map<std::string, std::string> to_map() const;
};

/// Reads either a JSON object or `key = value` lines ('#' comments).
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);
std::map<std::string, std::string> parse_key_values(std::string_view text);

PipelineConfig load_config(const std::filesystem::path& path);

}  // namespace promptreco
