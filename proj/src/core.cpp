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

#include "promptreco/core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace promptreco {

RunId::RunId(std::uint32_t value) : value_(value) {
  if (value < 1 || value > kMax) throw NamingError(fmt::format("run number {} out of range", value));
}

std::string RunId::str() const { return fmt::format("{:08}", value_); }

StreamRegistry::StreamRegistry(std::vector<Stream> streams, std::vector<Skim> skims)
    : streams_(std::move(streams)), skims_(std::move(skims)) {
  std::set<std::string> seen;
  for (const auto& s : streams_) {
    if (s.name.empty() || !seen.insert(s.name).second)
      throw NamingError(fmt::format("duplicate or empty stream name '{}'", s.name));
  }
  for (const auto& k : skims_) {
    if (k.name.empty() || !seen.insert(k.name).second)
      throw NamingError(fmt::format("duplicate or empty skim name '{}'", k.name));
    if (k.parent >= streams_.size())
      throw NamingError(fmt::format("skim '{}' has no parent stream", k.name));
  }
}

StreamRegistry StreamRegistry::standard() {
  std::vector<Stream> streams = {
      {"AllEvents", 0u},
      {"Hadronic", 1u << 8},
      {"Leptonic", 1u << 9},
      {"Neutral", 1u << 10},
  };
  std::vector<Skim> skims;
  skims.reserve(111);
  for (std::uint32_t j = 0; j < 111; ++j) {
    // Two distinct selection bits from the upper 21 tag bits.
    std::uint32_t a = (j * 7) % 21;
    std::uint32_t b = (j * 13 + 5) % 21;
    if (a == b) b = (b + 1) % 21;
    std::size_t parent = j % streams.size();
    std::uint32_t mask = streams[parent].mask | (1u << (11 + a)) | (1u << (11 + b));
    skims.push_back({fmt::format("Skim{:03}", j + 1), parent, mask});
  }
  return StreamRegistry(std::move(streams), std::move(skims));
}

bool StreamRegistry::contains(std::string_view name) const {
  auto eq = [&](const auto& x) { return x.name == name; };
  return std::any_of(streams_.begin(), streams_.end(), eq) ||
         std::any_of(skims_.begin(), skims_.end(), eq);
}

bool StreamRegistry::stream_matches(std::size_t stream, std::uint32_t tag) const {
  const auto mask = streams_.at(stream).mask;
  return (tag & mask) == mask;
}

bool StreamRegistry::skim_matches(std::size_t skim, std::uint32_t tag) const {
  const auto& k = skims_.at(skim);
  return stream_matches(k.parent, tag) && (tag & k.mask) == k.mask;
}

std::vector<std::string> StreamRegistry::collection_labels() const {
  std::vector<std::string> out;
  out.reserve(collections_per_run());
  for (const auto& s : streams_) out.push_back(s.name);
  for (const auto& k : skims_) out.push_back(k.name);
  return out;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

namespace {

std::string block_high(std::uint32_t run) { return fmt::format("{:04}", run / 10000); }
std::string block_low(std::uint32_t run) { return fmt::format("{:04}", (run % 10000) / 1000 * 1000); }

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

std::uint32_t to_u32(std::string_view s) {
  std::uint32_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw NamingError(fmt::format("bad number '{}'", s));
  return v;
}

void check_segment(std::string_view what, std::string_view s) {
  if (s.empty() || s.find('/') != std::string_view::npos)
    throw NamingError(fmt::format("invalid {} '{}'", what, s));
}

}  // namespace

std::string make_collection_name(const CollectionName& c, const StreamRegistry& registry,
                                 const NamingScheme& scheme) {
  if (c.version >= 100) throw NamingError(fmt::format("version {} needs more than two digits", c.version));
  if (!registry.contains(c.stream)) throw NamingError(fmt::format("unregistered stream '{}'", c.stream));
  check_segment("release", c.release);
  check_segment("leaf", c.leaf);
  const auto run = c.run.value();
  return fmt::format("/groups/{}/{}/{}/{}{}V{:02}{}/{}/{}/{}", c.stream, block_high(run), block_low(run),
                     c.production ? 'P' : 'T', c.release, c.version, scheme.release_suffix, c.run.str(),
                     scheme.cluster_segment, c.leaf);
}

CollectionName parse_collection_name(std::string_view path, const StreamRegistry& registry,
                                     const NamingScheme& scheme) {
  auto parts = split(path, '/');
  if (parts.size() != 9 || !parts[0].empty() || parts[1] != "groups")
    throw NamingError(fmt::format("malformed collection path '{}'", path));

  CollectionName c;
  c.stream = std::string(parts[2]);
  if (!registry.contains(c.stream)) throw NamingError(fmt::format("unregistered stream '{}'", c.stream));

  auto run_seg = parts[6];
  if (run_seg.size() != 8 || !all_digits(run_seg)) throw NamingError(fmt::format("bad run segment '{}'", run_seg));
  c.run = RunId(to_u32(run_seg));

  if (parts[3] != block_high(c.run.value()) || parts[4] != block_low(c.run.value()))
    throw NamingError(fmt::format("block segments {}/{} inconsistent with run {}", parts[3], parts[4], run_seg));

  auto tag = parts[5];
  const auto& sfx = scheme.release_suffix;
  // {P|T}{release}V{nn}{suffix}
  if (tag.size() < 1 + 1 + 3 + sfx.size() || tag.substr(tag.size() - sfx.size()) != sfx)
    throw NamingError(fmt::format("bad release segment '{}'", tag));
  if (tag[0] != 'P' && tag[0] != 'T') throw NamingError(fmt::format("bad release kind in '{}'", tag));
  c.production = tag[0] == 'P';
  auto body = tag.substr(1, tag.size() - 1 - sfx.size());
  auto vpos = body.size() - 3;
  if (body[vpos] != 'V' || !all_digits(body.substr(vpos + 1)))
    throw NamingError(fmt::format("bad version in '{}'", tag));
  c.version = to_u32(body.substr(vpos + 1));
  c.release = std::string(body.substr(0, vpos));
  check_segment("release", c.release);

  if (parts[7] != scheme.cluster_segment) throw NamingError(fmt::format("unexpected segment '{}'", parts[7]));
  c.leaf = std::string(parts[8]);
  check_segment("leaf", c.leaf);
  return c;
}

CollectionName collection_for(std::string_view stream, std::string_view release, bool production,
                              std::uint32_t version, RunId run) {
  return {std::string(stream), std::string(release), production, version, run, lowercase(stream)};
}

// -- configuration ---------------------------------------------------------

namespace {

double to_double(std::string_view key, std::string_view v) {
  std::string s(v);
  char* end = nullptr;
  double d = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ConfigError(fmt::format("{}: not a number '{}'", key, v));
  return d;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  // Accept integral values written as reals ("4194304.0", "1e6").
  double d = to_double(key, v);
  if (d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d)))
    throw ConfigError(fmt::format("{}: not a non-negative integer '{}'", key, v));
  return static_cast<std::uint64_t>(d);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

void PipelineConfig::set(std::string_view key, std::string_view value) {
  if (key == "accept_fraction") accept_fraction = to_double(key, value);
  else if (key == "event_payload_bytes") event_payload_bytes = static_cast<std::uint32_t>(to_u64(key, value));
  else if (key == "output_bytes_per_event") output_bytes_per_event = static_cast<std::uint32_t>(to_u64(key, value));
  else if (key == "dbfile_max_bytes") dbfile_max_bytes = to_u64(key, value);
  else if (key == "sample_interval_s") sample_interval_s = to_double(key, value);
  else if (key == "calib_min_samples") calib_min_samples = to_u64(key, value);
  else if (key == "killer_threshold") killer_threshold = static_cast<std::uint32_t>(to_u64(key, value));
  else if (key == "commit_interval_s") commit_interval_s = to_double(key, value);
  else if (key == "commit_cache_bytes") commit_cache_bytes = to_u64(key, value);
  else if (key == "jitter_fraction") jitter_fraction = to_double(key, value);
  else if (key == "lease_ttl_s") lease_ttl_s = to_double(key, value);
  else if (key == "fill_threshold") fill_threshold = to_double(key, value);
  else if (key == "containers_per_file") containers_per_file = static_cast<std::uint32_t>(to_u64(key, value));
  else throw ConfigError(fmt::format("unknown configuration key '{}'", key));
}

std::map<std::string, std::string> PipelineConfig::to_map() const {
  return {
      {"accept_fraction", fmt::format("{}", accept_fraction)},
      {"event_payload_bytes", fmt::format("{}", event_payload_bytes)},
      {"output_bytes_per_event", fmt::format("{}", output_bytes_per_event)},
      {"dbfile_max_bytes", fmt::format("{}", dbfile_max_bytes)},
      {"sample_interval_s", fmt::format("{}", sample_interval_s)},
      {"calib_min_samples", fmt::format("{}", calib_min_samples)},
      {"killer_threshold", fmt::format("{}", killer_threshold)},
      {"commit_interval_s", fmt::format("{}", commit_interval_s)},
      {"commit_cache_bytes", fmt::format("{}", commit_cache_bytes)},
      {"jitter_fraction", fmt::format("{}", jitter_fraction)},
      {"lease_ttl_s", fmt::format("{}", lease_ttl_s)},
      {"fill_threshold", fmt::format("{}", fill_threshold)},
      {"containers_per_file", fmt::format("{}", containers_per_file)},
  };
}

void PipelineConfig::validate() const {
  auto require = [](bool ok, std::string_view what) {
    if (!ok) throw ConfigError(fmt::format("invalid configuration: {}", what));
  };
  // accept_fraction is allowed to reach the closed ends so filters can be disabled in tests.
  require(accept_fraction >= 0.0 && accept_fraction <= 1.0, "accept_fraction must be in [0,1]");
  require(event_payload_bytes > 0, "event_payload_bytes must be positive");
  require(output_bytes_per_event > 0, "output_bytes_per_event must be positive");
  require(dbfile_max_bytes > 0, "dbfile_max_bytes must be positive");
  require(sample_interval_s > 0, "sample_interval_s must be positive");
  require(calib_min_samples > 0, "calib_min_samples must be positive");
  require(killer_threshold > 0, "killer_threshold must be positive");
  require(commit_interval_s > 0, "commit_interval_s must be positive");
  require(commit_cache_bytes > 0, "commit_cache_bytes must be positive");
  require(jitter_fraction >= 0 && jitter_fraction < 1, "jitter_fraction must be in [0,1)");
  require(lease_ttl_s > 0, "lease_ttl_s must be positive");
  require(fill_threshold > 0 && fill_threshold <= 1, "fill_threshold must be in (0,1]");
  require(containers_per_file > 0, "containers_per_file must be positive");
}

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  auto body = trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("bad JSON configuration: {}", e.what()));
    }
    if (!doc.is_object()) throw ConfigError("JSON configuration must be an object");
    for (const auto& [k, v] : doc.items())
      out[k] = v.is_string() ? v.get<std::string>() : v.dump();
    return out;
  }
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view l = line;
    if (auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    auto eq = l.find('=');
    if (eq == std::string_view::npos) throw ConfigError(fmt::format("line {}: expected key = value", lineno));
    out[std::string(trim(l.substr(0, eq)))] = std::string(trim(l.substr(eq + 1)));
  }
  return out;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open configuration '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

PipelineConfig load_config(const std::filesystem::path& path) {
  PipelineConfig cfg;
  for (const auto& [k, v] : read_key_values(path)) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

}  // namespace promptreco
