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

// XTC run files.
//
// One file holds every raw event of one run. All integers little-endian.
//
//   header = "XTC1" | u16 version | u32 run | u64 event_count | u16 truth_len | truth bytes
//   frame  = u32 event_id | u64 timestamp_micros | u32 tag_bits | u32 payload_len | payload | u32 crc32
//
// The frame CRC covers everything in the frame before it. The payload
// encodes the per-subsystem readings and is zero-padded to the configured
// event size:
//
//   payload = u16 n | n x (f64 value | f64 pulse_amplitude | f64 pulse_response) | zeros

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "promptreco/bytes.hpp"
#include "promptreco/core.hpp"

namespace promptreco {

class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  CorruptionError(std::uint64_t frame, const std::string& what);
  std::uint64_t frame_index() const { return frame_; }

 private:
  std::uint64_t frame_;
};

/// Generator parameters for synthetic runs. Detector conditions drift
/// linearly from `reference_run`:
///   pedestal(run) = pedestal + pedestal_drift * (run - reference_run)
///   gain(run)     = gain * (1 + gain_drift * (run - reference_run))
struct DetectorTruth {
  std::vector<double> pedestal = {1.0, -0.5, 0.25, 2.0};
  std::vector<double> gain = {1.0, 1.2, 0.8, 1.1};
  double pedestal_drift = 0.0;
  double gain_drift = 0.0;
  std::uint32_t reference_run = 1;
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;

  std::size_t subsystems() const { return pedestal.size(); }
  double pedestal_at(RunId run, std::size_t subsystem) const;
  double gain_at(RunId run, std::size_t subsystem) const;

  /// The quantity reconstruction should recover, regenerable from the seed.
  double hidden_quantity(RunId run, std::uint32_t event_id, std::size_t subsystem) const;

  void validate() const;
  std::string encode() const;
  static DetectorTruth decode(std::string_view text);

  friend bool operator==(const DetectorTruth&, const DetectorTruth&) = default;
};

struct Reading {
  double value = 0;            // gain * x + pedestal + noise
  double pulse_amplitude = 0;  // injected reference pulse, known
  double pulse_response = 0;   // gain * amplitude + pedestal + noise

  friend bool operator==(const Reading&, const Reading&) = default;
};

struct EventRecord {
  RunId run;
  std::uint32_t event_id = 0;
  std::uint64_t timestamp_us = 0;
  std::uint32_t tag_bits = 0;
  std::vector<Reading> readings;
  std::uint32_t payload_bytes = 0;

  double timestamp_s() const { return static_cast<double>(timestamp_us) * 1e-6; }

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

inline constexpr std::uint16_t kXtcVersion = 1;
inline constexpr std::size_t kFrameOverhead = 4 + 8 + 4 + 4 + 4;

std::size_t min_payload_bytes(std::size_t subsystems);
Bytes encode_payload(const EventRecord& e);
Bytes encode_frame(const EventRecord& e);
/// Decodes one frame (including its trailing CRC) and verifies the checksum.
EventRecord decode_frame(ByteView frame, RunId run, std::uint64_t index = 0);

struct XtcHeader {
  std::uint16_t version = kXtcVersion;
  RunId run;
  std::uint64_t event_count = 0;
  std::optional<DetectorTruth> truth;

  Bytes encode() const;
};

class XtcWriter {
 public:
  XtcWriter(const std::filesystem::path& path, RunId run, std::optional<DetectorTruth> truth = std::nullopt);
  XtcWriter(const XtcWriter&) = delete;
  XtcWriter& operator=(const XtcWriter&) = delete;
  ~XtcWriter();

  void append(const EventRecord& e);
  /// Patches the event count into the header and closes the file.
  XtcHeader close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  XtcHeader header_;
  std::optional<std::uint32_t> last_id_;
  std::uint64_t last_ts_ = 0;
  bool closed_ = false;
};

/// Sequential reader. Each frame checksum is verified before the event is yielded.
class XtcReader {
 public:
  explicit XtcReader(const std::filesystem::path& path);

  const XtcHeader& header() const { return header_; }
  std::optional<EventRecord> next();
  std::uint64_t frames_read() const { return index_; }

 private:
  std::ifstream in_;
  XtcHeader header_;
  std::uint64_t index_ = 0;
};

std::vector<EventRecord> read_events(const std::filesystem::path& path);

/// Deterministic synthetic events: timestamps uniform over [0, duration_s),
/// sorted; tag bits and readings hashed from (seed, run, event_id).
std::vector<EventRecord> generate_events(RunId run, std::uint32_t n_events, double duration_s,
                                         const DetectorTruth& truth, std::uint32_t payload_bytes);

XtcHeader generate_run(const std::filesystem::path& path, RunId run, std::uint32_t n_events, double duration_s,
                       const DetectorTruth& truth, std::uint32_t payload_bytes);

void write_run(const std::filesystem::path& path, RunId run, const std::vector<EventRecord>& events,
               std::optional<DetectorTruth> truth = std::nullopt);

}  // namespace promptreco
