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

#include "promptreco/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace promptreco {

namespace fs = std::filesystem;

PartialTransferError::PartialTransferError(std::vector<RunId> missing)
    : Error([&] {
        std::string list;
        for (auto r : missing) list += (list.empty() ? "" : ", ") + std::to_string(r.value());
        return fmt::format("conditions missing at source for runs: {}", list);
      }()),
      missing_(std::move(missing)) {}

// -- statistics ----------------------------------------------------------------

void SubsystemStats::add(double amplitude, double response) {
  ++count;
  sum_amp += amplitude;
  sum_amp2 += amplitude * amplitude;
  sum_resp += response;
  sum_resp2 += response * response;
  sum_amp_resp += amplitude * response;
}

SubsystemStats& SubsystemStats::merge(const SubsystemStats& o) {
  count += o.count;
  sum_amp += o.sum_amp;
  sum_amp2 += o.sum_amp2;
  sum_resp += o.sum_resp;
  sum_resp2 += o.sum_resp2;
  sum_amp_resp += o.sum_amp_resp;
  return *this;
}

std::optional<SubsystemStats::Fit> SubsystemStats::fit() const {
  if (count < 3) return std::nullopt;
  const double n = static_cast<double>(count);
  const double sxx = sum_amp2 - sum_amp * sum_amp / n;
  const double sxy = sum_amp_resp - sum_amp * sum_resp / n;
  const double syy = sum_resp2 - sum_resp * sum_resp / n;
  if (!(sxx > 0)) return std::nullopt;
  Fit f;
  f.gain = sxy / sxx;
  f.pedestal = (sum_resp - f.gain * sum_amp) / n;
  const double rss = std::max(0.0, syy - f.gain * sxy);
  const double s2 = rss / (n - 2);
  const double mean_amp = sum_amp / n;
  f.gain_se = std::sqrt(s2 / sxx);
  f.pedestal_se = std::sqrt(s2 * (1.0 / n + mean_amp * mean_amp / sxx));
  return f;
}

std::uint64_t CalibrationStats::samples() const {
  if (subsystems.empty()) return 0;
  std::uint64_t m = subsystems.front().count;
  for (const auto& s : subsystems) m = std::min(m, s.count);
  return m;
}

CalibrationStats& CalibrationStats::merge(const CalibrationStats& o) {
  if (subsystems.size() < o.subsystems.size()) subsystems.resize(o.subsystems.size());
  for (std::size_t i = 0; i < o.subsystems.size(); ++i) subsystems[i].merge(o.subsystems[i]);
  return *this;
}

CalibrationStats accumulate(CalibrationStats stats, const EventRecord& e) {
  if (stats.subsystems.size() < e.readings.size()) stats.subsystems.resize(e.readings.size());
  for (std::size_t s = 0; s < e.readings.size(); ++s)
    stats.subsystems[s].add(e.readings[s].pulse_amplitude, e.readings[s].pulse_response);
  return stats;
}

CalibrationStats merge(CalibrationStats a, const CalibrationStats& b) { return std::move(a.merge(b)); }

PcSampler::PcSampler(double interval_s) : interval_s_(interval_s) {
  if (!(interval_s > 0)) throw ConfigError("sample interval must be positive");
}

bool PcSampler::accept(const EventRecord& e) {
  auto bucket = static_cast<std::int64_t>(std::floor(e.timestamp_s() / interval_s_));
  if (last_bucket_ && *last_bucket_ == bucket) return false;
  last_bucket_ = bucket;
  return true;
}

// -- calibration documents -------------------------------------------------------

std::string calibration_version(RunId validity_start) { return fmt::format("rc{}", validity_start.str()); }

RollingCalibration RollingCalibration::identity(std::size_t subsystems, RunId validity) {
  RollingCalibration c;
  c.constants.assign(subsystems, SubsystemConstants{});
  c.source_first = c.source_last = c.validity_start = validity;
  c.version = calibration_version(validity);
  return c;
}

std::string RollingCalibration::encode() const {
  nlohmann::json consts = nlohmann::json::array();
  for (const auto& k : constants)
    consts.push_back({{"pedestal", k.pedestal}, {"gain", k.gain}, {"pedestal_se", k.pedestal_se}, {"gain_se", k.gain_se}});
  nlohmann::json doc = {
      {"format", "promptreco-rolling-calibration"},
      {"format_version", 1},
      {"version", version},
      {"validity_start", validity_start.value()},
      {"source_first", source_first.value()},
      {"source_last", source_last.value()},
      {"samples", samples},
      {"constants", consts},
  };
  auto body = doc.dump() + "\n";
  return body + fmt::format("crc32 {:08x}\n", crc32(as_bytes(body)));
}

RollingCalibration RollingCalibration::decode(std::string_view text) {
  auto nl = text.find('\n');
  if (nl == std::string_view::npos) throw ConditionsError("calibration document has no checksum line");
  auto body = text.substr(0, nl + 1);
  auto trailer = text.substr(nl + 1);
  if (trailer != fmt::format("crc32 {:08x}\n", crc32(as_bytes(body))))
    throw ConditionsError("calibration checksum mismatch");
  try {
    auto j = nlohmann::json::parse(body);
    if (j.at("format") != "promptreco-rolling-calibration" || j.at("format_version") != 1)
      throw ConditionsError("unknown calibration format");
    RollingCalibration c;
    c.version = j.at("version").get<std::string>();
    c.validity_start = RunId(j.at("validity_start").get<std::uint32_t>());
    c.source_first = RunId(j.at("source_first").get<std::uint32_t>());
    c.source_last = RunId(j.at("source_last").get<std::uint32_t>());
    c.samples = j.at("samples").get<std::uint64_t>();
    for (const auto& k : j.at("constants"))
      c.constants.push_back({k.at("pedestal").get<double>(), k.at("gain").get<double>(),
                             k.at("pedestal_se").get<double>(), k.at("gain_se").get<double>()});
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConditionsError(fmt::format("malformed calibration document: {}", e.what()));
  }
}

std::optional<RollingCalibration> roll(std::span<const RunStats> window, std::uint64_t min_samples) {
  if (window.empty()) return std::nullopt;
  CalibrationStats merged;
  std::size_t first = window.size();
  while (first > 0) {
    --first;
    merged.merge(window[first].stats);
    if (merged.samples() >= min_samples) break;
  }
  if (merged.samples() < min_samples) return std::nullopt;

  RollingCalibration cal;
  cal.source_first = window[first].run;
  cal.source_last = window.back().run;
  cal.validity_start = window.back().run;
  cal.samples = merged.samples();
  cal.version = calibration_version(cal.validity_start);
  for (const auto& s : merged.subsystems) {
    auto f = s.fit();
    if (!f || !(f->gain > 0)) return std::nullopt;
    cal.constants.push_back({f->pedestal, f->gain, f->pedestal_se, f->gain_se});
  }
  return cal;
}

// -- store -------------------------------------------------------------------

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_federation(const std::string& f) {
  if (f.empty() || f.find('/') != std::string::npos || f == "." || f == "..")
    throw ConditionsError(fmt::format("invalid federation name '{}'", f));
}

}  // namespace

ConditionsStore::ConditionsStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

std::map<std::uint32_t, std::string> ConditionsStore::load(const std::string& federation) const {
  std::map<std::uint32_t, std::string> out;
  auto dir = root_ / federation;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto& p = entry.path();
    if (p.extension() != ".cal") continue;
    auto stem = p.stem().string();
    if (stem.size() != 8) continue;
    out[static_cast<std::uint32_t>(std::stoul(stem))] = read_file(p);
  }
  return out;
}

void ConditionsStore::publish(const std::string& federation, const RollingCalibration& cal) {
  publish_bytes(federation, cal.validity_start, cal.encode());
}

void ConditionsStore::publish_bytes(const std::string& federation, RunId validity_start, const std::string& bytes) {
  check_federation(federation);
  auto decoded = RollingCalibration::decode(bytes);
  if (decoded.validity_start != validity_start)
    throw ConditionsError("document validity start disagrees with its key");
  std::lock_guard lock(mu_);
  auto existing = load(federation);
  if (auto it = existing.find(validity_start.value()); it != existing.end()) {
    if (it->second == bytes) return;
    throw ConditionsError(fmt::format("{}/{} already published with different content", federation,
                                      validity_start.str()));
  }
  if (!existing.empty() && existing.rbegin()->first > validity_start.value())
    throw ConditionsError(fmt::format("{}: validity start {} precedes latest entry {}", federation,
                                      validity_start.value(), existing.rbegin()->first));
  auto dir = root_ / federation;
  fs::create_directories(dir);
  auto final_path = dir / (validity_start.str() + ".cal");
  auto tmp = dir / (validity_start.str() + ".cal.tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << bytes;
    if (!out) throw ConditionsError(fmt::format("cannot write '{}'", tmp.string()));
  }
  fs::rename(tmp, final_path);
}

RollingCalibration ConditionsStore::lookup(const std::string& federation, RunId run, LookupMode mode) const {
  check_federation(federation);
  std::uint32_t limit = run.value();
  if (mode == LookupMode::one_pass) {
    if (limit == 1) throw ConditionsMissing(fmt::format("{}: no run precedes run 1", federation));
    --limit;
  }
  std::map<std::uint32_t, std::string> entries;
  {
    std::lock_guard lock(mu_);
    entries = load(federation);
  }
  auto it = entries.upper_bound(limit);
  if (it == entries.begin())
    throw ConditionsMissing(fmt::format("{}: no calibration valid for run {}", federation, run.value()));
  return RollingCalibration::decode(std::prev(it)->second);
}

std::optional<std::string> ConditionsStore::entry_bytes(const std::string& federation, RunId validity_start) const {
  check_federation(federation);
  auto path = root_ / federation / (validity_start.str() + ".cal");
  std::lock_guard lock(mu_);
  if (!fs::exists(path)) return std::nullopt;
  return read_file(path);
}

std::vector<RunId> ConditionsStore::validity_starts(const std::string& federation) const {
  check_federation(federation);
  std::lock_guard lock(mu_);
  std::vector<RunId> out;
  for (const auto& [k, _] : load(federation)) out.emplace_back(k);
  return out;
}

std::vector<std::string> ConditionsStore::federations() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root_))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

void transfer_conditions(const ConditionsStore& src, const std::string& src_federation, ConditionsStore& dst,
                         const std::string& dst_federation, std::span<const RunId> runs) {
  std::vector<RunId> ordered(runs.begin(), runs.end());
  std::sort(ordered.begin(), ordered.end());
  std::vector<RunId> missing;
  for (auto run : ordered) {
    auto bytes = src.entry_bytes(src_federation, run);
    if (!bytes) {
      missing.push_back(run);
      continue;
    }
    dst.publish_bytes(dst_federation, run, *bytes);
  }
  if (!missing.empty()) throw PartialTransferError(std::move(missing));
}

std::vector<TimelineInterval> partition_timeline(std::span<const RunId> runs, std::size_t k) {
  if (k < 1) throw ConfigError("timeline needs at least one interval");
  if (runs.empty()) throw ConfigError("timeline needs at least one run");
  if (k > runs.size()) throw ConfigError(fmt::format("cannot split {} runs into {} intervals", runs.size(), k));
  if (!std::is_sorted(runs.begin(), runs.end()) || std::adjacent_find(runs.begin(), runs.end()) != runs.end())
    throw ConfigError("timeline runs must be strictly ascending");

  std::vector<TimelineInterval> out;
  const std::size_t base = runs.size() / k, extra = runs.size() % k;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t len = base + (i < extra ? 1 : 0);
    TimelineInterval iv;
    iv.instance = i;
    iv.runs.assign(runs.begin() + static_cast<std::ptrdiff_t>(pos), runs.begin() + static_cast<std::ptrdiff_t>(pos + len));
    iv.first = iv.runs.front();
    iv.last = iv.runs.back();
    out.push_back(std::move(iv));
    pos += len;
  }
  return out;
}

}  // namespace promptreco
