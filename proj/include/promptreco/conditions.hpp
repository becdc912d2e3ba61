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

// Rolling calibrations and the conditions store.
//
// The prompt-calibration pass samples events at a fixed rate in run time,
// accumulates least-squares sufficient statistics of each subsystem's
// response to its injected reference pulse, and merges the statistics of
// the most recent runs until there are enough samples. The result is
// published with a validity interval that begins at the run which produced
// it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptreco/core.hpp"
#include "promptreco/xtc.hpp"

namespace promptreco {

class ConditionsMissing : public Error {
 public:
  using Error::Error;
};

class ConditionsError : public Error {
 public:
  using Error::Error;
};

class PartialTransferError : public Error {
 public:
  explicit PartialTransferError(std::vector<RunId> missing);
  const std::vector<RunId>& missing() const { return missing_; }

 private:
  std::vector<RunId> missing_;
};

/// Sufficient statistics for the straight-line fit response = gain * amplitude + pedestal.
struct SubsystemStats {
  std::uint64_t count = 0;
  double sum_amp = 0;
  double sum_amp2 = 0;
  double sum_resp = 0;
  double sum_resp2 = 0;
  double sum_amp_resp = 0;

  void add(double amplitude, double response);
  SubsystemStats& merge(const SubsystemStats& other);

  struct Fit {
    double pedestal;
    double gain;
    double pedestal_se;
    double gain_se;
  };
  /// Closed-form least squares; needs at least three samples with spread amplitudes.
  std::optional<Fit> fit() const;
};

struct CalibrationStats {
  std::vector<SubsystemStats> subsystems;

  std::uint64_t samples() const;
  CalibrationStats& merge(const CalibrationStats& other);
};

CalibrationStats accumulate(CalibrationStats stats, const EventRecord& sampled);
CalibrationStats merge(CalibrationStats a, const CalibrationStats& b);

/// Keeps the first event of every `interval_s` bucket of run time.
class PcSampler {
 public:
  explicit PcSampler(double interval_s);
  bool accept(const EventRecord& e);
  void reset() { last_bucket_.reset(); }

 private:
  double interval_s_;
  std::optional<std::int64_t> last_bucket_;
};

struct SubsystemConstants {
  double pedestal = 0;
  double gain = 1;
  double pedestal_se = 0;
  double gain_se = 0;

  friend bool operator==(const SubsystemConstants&, const SubsystemConstants&) = default;
};

struct RollingCalibration {
  std::vector<SubsystemConstants> constants;
  RunId source_first;
  RunId source_last;
  RunId validity_start;
  std::uint64_t samples = 0;
  std::string version;

  /// Pedestal 0, gain 1 for every subsystem.
  static RollingCalibration identity(std::size_t subsystems, RunId validity);

  /// Self-describing text document with a trailing CRC-32 line.
  std::string encode() const;
  static RollingCalibration decode(std::string_view text);

  friend bool operator==(const RollingCalibration&, const RollingCalibration&) = default;
};

std::string calibration_version(RunId validity_start);

struct RunStats {
  RunId run;
  CalibrationStats stats;
};

/// Merges backwards from the last run of `window` until `min_samples` is
/// reached. Returns nullopt when even the whole window is short.
std::optional<RollingCalibration> roll(std::span<const RunStats> window, std::uint64_t min_samples);

enum class LookupMode {
  two_pass,  // greatest validity_start <= run
  one_pass,  // greatest validity_start <= run - 1
};

/// Directory of immutable calibration files, `{federation}/{validity_start:08}.cal`.
class ConditionsStore {
 public:
  explicit ConditionsStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  /// Publishing an identical document again is a no-op; anything else at an
  /// existing or earlier validity start is rejected.
  void publish(const std::string& federation, const RollingCalibration& cal);
  void publish_bytes(const std::string& federation, RunId validity_start, const std::string& bytes);

  RollingCalibration lookup(const std::string& federation, RunId run, LookupMode mode = LookupMode::two_pass) const;
  std::optional<std::string> entry_bytes(const std::string& federation, RunId validity_start) const;
  std::vector<RunId> validity_starts(const std::string& federation) const;
  std::vector<std::string> federations() const;

 private:
  std::map<std::uint32_t, std::string> load(const std::string& federation) const;

  std::filesystem::path root_;
  mutable std::mutex mu_;
};

/// Copies the entries whose validity starts at each of `runs`. Present
/// entries are copied byte for byte even when some are missing; the missing
/// ones are then reported.
void transfer_conditions(const ConditionsStore& src, const std::string& src_federation, ConditionsStore& dst,
                         const std::string& dst_federation, std::span<const RunId> runs);

struct TimelineInterval {
  RunId first;
  RunId last;
  std::size_t instance = 0;
  std::vector<RunId> runs;
};

/// Splits an ordered run list into `k` contiguous intervals whose sizes differ by at most one.
std::vector<TimelineInterval> partition_timeline(std::span<const RunId> runs, std::size_t k);

}  // namespace promptreco
