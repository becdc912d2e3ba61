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

#include "promptreco/xtc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace promptreco {

namespace {

constexpr char kMagic[4] = {'X', 'T', 'C', '1'};

enum Stream : std::uint64_t { kHidden = 1, kAmplitude, kNoiseValue, kNoisePulse, kTag };

double gaussian(std::uint64_t key) {
  double u1 = 1.0 - unit_interval(mix64(key));
  double u2 = unit_interval(mix64(key ^ 0xa5a5a5a5a5a5a5a5ull));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t event_key(const DetectorTruth& t, RunId run, std::uint32_t event_id, std::size_t s, Stream which) {
  return hash64(hash64(t.seed, run.value(), event_id), s, which);
}

}  // namespace

CorruptionError::CorruptionError(std::uint64_t frame, const std::string& what)
    : Error(fmt::format("frame {}: {}", frame, what)), frame_(frame) {}

// -- truth -------------------------------------------------------------------

double DetectorTruth::pedestal_at(RunId run, std::size_t s) const {
  double dr = static_cast<double>(run.value()) - static_cast<double>(reference_run);
  return pedestal.at(s) + pedestal_drift * dr;
}

double DetectorTruth::gain_at(RunId run, std::size_t s) const {
  double dr = static_cast<double>(run.value()) - static_cast<double>(reference_run);
  double g = gain.at(s) * (1.0 + gain_drift * dr);
  if (g <= 0) throw ConfigError(fmt::format("gain drift drives subsystem {} non-positive at run {}", s, run.value()));
  return g;
}

double DetectorTruth::hidden_quantity(RunId run, std::uint32_t event_id, std::size_t s) const {
  return 10.0 * unit_interval(event_key(*this, run, event_id, s, kHidden));
}

void DetectorTruth::validate() const {
  if (pedestal.empty() || pedestal.size() != gain.size())
    throw ConfigError("truth needs matching, non-empty pedestal and gain lists");
  for (double g : gain)
    if (!(g > 0)) throw ConfigError("truth gain must be positive");
  if (!(noise_sigma >= 0)) throw ConfigError("truth noise sigma must be non-negative");
}

std::string DetectorTruth::encode() const {
  nlohmann::json j = {
      {"pedestal", pedestal},   {"gain", gain},         {"pedestal_drift", pedestal_drift},
      {"gain_drift", gain_drift}, {"reference_run", reference_run}, {"noise_sigma", noise_sigma},
      {"seed", seed},
  };
  return j.dump();
}

DetectorTruth DetectorTruth::decode(std::string_view text) {
  try {
    auto j = nlohmann::json::parse(text);
    DetectorTruth t;
    t.pedestal = j.at("pedestal").get<std::vector<double>>();
    t.gain = j.at("gain").get<std::vector<double>>();
    t.pedestal_drift = j.at("pedestal_drift").get<double>();
    t.gain_drift = j.at("gain_drift").get<double>();
    t.reference_run = j.at("reference_run").get<std::uint32_t>();
    t.noise_sigma = j.at("noise_sigma").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad truth summary: {}", e.what()));
  }
}

// -- frames ------------------------------------------------------------------

std::size_t min_payload_bytes(std::size_t subsystems) { return 2 + subsystems * 24; }

Bytes encode_payload(const EventRecord& e) {
  if (e.readings.size() > 0xffff) throw FormatError("too many readings");
  if (e.payload_bytes < min_payload_bytes(e.readings.size()))
    throw FormatError(fmt::format("payload of {} bytes cannot hold {} readings", e.payload_bytes, e.readings.size()));
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(e.readings.size()));
  for (const auto& r : e.readings) {
    w.f64(r.value);
    w.f64(r.pulse_amplitude);
    w.f64(r.pulse_response);
  }
  w.zeros(e.payload_bytes - w.size());
  return w.take();
}

Bytes encode_frame(const EventRecord& e) {
  auto payload = encode_payload(e);
  ByteWriter w;
  w.u32(e.event_id);
  w.u64(e.timestamp_us);
  w.u32(e.tag_bits);
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.bytes(payload);
  w.u32(crc32(w.view()));
  return w.take();
}

EventRecord decode_frame(ByteView frame, RunId run, std::uint64_t index) {
  if (frame.size() < kFrameOverhead) throw CorruptionError(index, "frame shorter than its fixed fields");
  auto body = frame.first(frame.size() - 4);
  ByteReader tail(frame.last(4));
  if (tail.u32() != crc32(body)) throw CorruptionError(index, "checksum mismatch");
  try {
    ByteReader r(body);
    EventRecord e;
    e.run = run;
    e.event_id = r.u32();
    e.timestamp_us = r.u64();
    e.tag_bits = r.u32();
    e.payload_bytes = r.u32();
    if (r.remaining() != e.payload_bytes) throw CorruptionError(index, "payload length disagrees with frame size");
    ByteReader p(r.bytes(e.payload_bytes));
    auto n = p.u16();
    e.readings.resize(n);
    for (auto& rd : e.readings) {
      rd.value = p.f64();
      rd.pulse_amplitude = p.f64();
      rd.pulse_response = p.f64();
    }
    return e;
  } catch (const DecodeError& err) {
    throw CorruptionError(index, err.what());
  }
}

Bytes XtcHeader::encode() const {
  ByteWriter w;
  w.bytes(as_bytes(std::string_view(kMagic, 4)));
  w.u16(version);
  w.u32(run.value());
  w.u64(event_count);
  std::string truth_text = truth ? truth->encode() : std::string{};
  w.str16(truth_text);
  return w.take();
}

// -- writer ------------------------------------------------------------------

XtcWriter::XtcWriter(const std::filesystem::path& path, RunId run, std::optional<DetectorTruth> truth)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw Error(fmt::format("cannot create '{}'", path.string()));
  header_.run = run;
  header_.truth = std::move(truth);
  auto h = header_.encode();
  out_.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
}

XtcWriter::~XtcWriter() {
  if (!closed_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void XtcWriter::append(const EventRecord& e) {
  if (closed_) throw Error("append to closed XTC writer");
  if (e.run != header_.run) throw FormatError("event belongs to a different run");
  if (last_id_ && e.event_id <= *last_id_) throw FormatError("event ids must be strictly increasing");
  if (e.timestamp_us < last_ts_) throw FormatError("timestamps must be non-decreasing");
  auto frame = encode_frame(e);
  out_.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
  if (!out_) throw Error(fmt::format("write failed on '{}'", path_.string()));
  last_id_ = e.event_id;
  last_ts_ = e.timestamp_us;
  ++header_.event_count;
}

XtcHeader XtcWriter::close() {
  if (closed_) return header_;
  closed_ = true;
  // event_count sits right after magic, version and run.
  out_.seekp(4 + 2 + 4);
  ByteWriter w;
  w.u64(header_.event_count);
  out_.write(reinterpret_cast<const char*>(w.view().data()), 8);
  out_.close();
  if (!out_) throw Error(fmt::format("closing '{}' failed", path_.string()));
  return header_;
}

// -- reader ------------------------------------------------------------------

namespace {

bool read_exact(std::ifstream& in, std::uint8_t* dst, std::size_t n) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(in.gcount()) == n;
}

}  // namespace

XtcReader::XtcReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw Error(fmt::format("cannot open '{}'", path.string()));
  std::uint8_t fixed[4 + 2 + 4 + 8 + 2];
  if (!read_exact(in_, fixed, sizeof fixed)) throw FormatError("file too short for an XTC header");
  if (std::memcmp(fixed, kMagic, 4) != 0) throw FormatError("bad magic, not an XTC file");
  ByteReader r(ByteView(fixed + 4, sizeof fixed - 4));
  header_.version = r.u16();
  if (header_.version != kXtcVersion) throw FormatError(fmt::format("unsupported XTC version {}", header_.version));
  try {
    header_.run = RunId(r.u32());
  } catch (const NamingError& e) {
    throw FormatError(e.what());
  }
  header_.event_count = r.u64();
  auto truth_len = r.u16();
  if (truth_len > 0) {
    std::string text(truth_len, '\0');
    if (!read_exact(in_, reinterpret_cast<std::uint8_t*>(text.data()), truth_len))
      throw FormatError("truncated truth summary");
    header_.truth = DetectorTruth::decode(text);
  }
}

std::optional<EventRecord> XtcReader::next() {
  if (index_ >= header_.event_count) {
    if (in_.peek() != std::char_traits<char>::eof())
      throw CorruptionError(index_, "trailing bytes beyond the declared event count");
    return std::nullopt;
  }
  Bytes frame(20);
  if (!read_exact(in_, frame.data(), 20)) throw CorruptionError(index_, "truncated frame header");
  std::uint32_t payload_len;
  std::memcpy(&payload_len, frame.data() + 16, 4);
  if (payload_len > (1u << 28)) throw CorruptionError(index_, "implausible payload length");
  frame.resize(20 + payload_len + 4);
  if (!read_exact(in_, frame.data() + 20, payload_len + 4)) throw CorruptionError(index_, "truncated frame body");
  auto e = decode_frame(frame, header_.run, index_);
  ++index_;
  return e;
}

std::vector<EventRecord> read_events(const std::filesystem::path& path) {
  XtcReader reader(path);
  std::vector<EventRecord> out;
  out.reserve(reader.header().event_count);
  while (auto e = reader.next()) out.push_back(std::move(*e));
  return out;
}

// -- generation --------------------------------------------------------------

std::vector<EventRecord> generate_events(RunId run, std::uint32_t n_events, double duration_s,
                                         const DetectorTruth& truth, std::uint32_t payload_bytes) {
  if (n_events < 1) throw ConfigError("a run needs at least one event");
  if (!(duration_s > 0)) throw ConfigError("run duration must be positive");
  truth.validate();

  std::mt19937_64 rng(hash64(truth.seed, run.value(), 0x7153));
  const auto span_us = static_cast<std::uint64_t>(duration_s * 1e6);
  std::vector<std::uint64_t> stamps(n_events);
  for (auto& t : stamps) t = std::min<std::uint64_t>(static_cast<std::uint64_t>(unit_interval(rng()) * span_us),
                                                     span_us > 0 ? span_us - 1 : 0);
  std::sort(stamps.begin(), stamps.end());

  const auto n_sub = truth.subsystems();
  std::vector<double> ped(n_sub), gain(n_sub);
  for (std::size_t s = 0; s < n_sub; ++s) {
    ped[s] = truth.pedestal_at(run, s);
    gain[s] = truth.gain_at(run, s);
  }

  std::vector<EventRecord> events(n_events);
  for (std::uint32_t i = 0; i < n_events; ++i) {
    auto& e = events[i];
    e.run = run;
    e.event_id = i;
    e.timestamp_us = stamps[i];
    e.tag_bits = static_cast<std::uint32_t>(hash64(hash64(truth.seed, run.value(), i), kTag));
    e.payload_bytes = payload_bytes;
    e.readings.resize(n_sub);
    for (std::size_t s = 0; s < n_sub; ++s) {
      double x = truth.hidden_quantity(run, i, s);
      double amp = 0.5 + 2.0 * unit_interval(event_key(truth, run, i, s, kAmplitude));
      double n1 = truth.noise_sigma * gaussian(event_key(truth, run, i, s, kNoiseValue));
      double n2 = truth.noise_sigma * gaussian(event_key(truth, run, i, s, kNoisePulse));
      e.readings[s] = {gain[s] * x + ped[s] + n1, amp, gain[s] * amp + ped[s] + n2};
    }
  }
  return events;
}

void write_run(const std::filesystem::path& path, RunId run, const std::vector<EventRecord>& events,
               std::optional<DetectorTruth> truth) {
  XtcWriter w(path, run, std::move(truth));
  for (const auto& e : events) w.append(e);
  w.close();
}

XtcHeader generate_run(const std::filesystem::path& path, RunId run, std::uint32_t n_events, double duration_s,
                       const DetectorTruth& truth, std::uint32_t payload_bytes) {
  auto events = generate_events(run, n_events, duration_s, truth, payload_bytes);
  XtcWriter w(path, run, truth);
  for (const auto& e : events) w.append(e);
  return w.close();
}

}  // namespace promptreco
