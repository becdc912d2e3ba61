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

// Farm node monitoring. Node agents expose their counters over HTTP, a
// scraper polls each configured device on its own timer, and the monitor
// keeps a retained time series per device with stale detection.
//
// Device list format (same grammar as the pipeline config):
//
//   device.pc01.endpoint   = 127.0.0.1:9101
//   device.pc01.interval_s = 5
//   device.pc01.metrics    = cpu_temp,cpu_user      # optional, default all

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/core.hpp"

namespace httplib {
class Server;
}

namespace promptreco {

class MonitorError : public Error {
 public:
  using Error::Error;
};

const std::vector<std::string>& metric_names();

struct DeviceConfig {
  std::string id;
  std::string endpoint;  // host:port of the node agent
  double interval_s = 5.0;
  std::vector<std::string> metrics = metric_names();
};

std::vector<DeviceConfig> parse_devices(const std::map<std::string, std::string>& kv);
std::vector<DeviceConfig> load_devices(const std::filesystem::path& path);

struct MetricsSample {
  std::string device;
  double time = 0;
  double cpu_temp = 0;    // Celsius
  double cpu_user = 0;    // percent
  double cpu_system = 0;  // percent
  double mem_used = 0;    // percent
  double disk_io = 0;     // bytes/s
  double net_io = 0;      // bytes/s

  /// Empty when the sample is acceptable.
  std::optional<std::string> invalid() const;
  double metric(std::string_view name) const;
  nlohmann::json to_json() const;
  static MetricsSample from_json(const nlohmann::json& j);
};

/// Plausible node metrics for simulated farms, deterministic in (device, time, seed).
MetricsSample synthesize_sample(const std::string& device, double time, std::uint64_t seed, double load = 0.5);

struct MonitorOptions {
  std::uint32_t miss_threshold = 3;
  double retention_s = 24 * 3600;
  std::size_t point_cap = 500;
};

struct SeriesPoint {
  double time = 0;
  double value = 0;  // bucket mean
  double min = 0;
  double max = 0;
  std::size_t samples = 0;
};

class Monitor {
 public:
  using AlertFn = std::function<void(const std::string& source, const std::string& message)>;

  Monitor(std::vector<DeviceConfig> devices, MonitorOptions opts = {}, AlertFn alert = {});

  /// Rejects out-of-range or out-of-order samples with a warning.
  bool ingest(const MetricsSample& s);
  /// One failed scrape. The device goes stale at the threshold, with one alert.
  void miss(const std::string& device, double time, const std::string& reason);

  bool stale(const std::string& device) const;
  std::vector<DeviceConfig> devices() const { return devices_; }
  std::size_t rejected() const { return rejected_.load(); }

  /// Samples with time in [from, to], ordered, bucketed to at most `cap`
  /// points (0 means the configured cap).
  std::vector<SeriesPoint> series(const std::string& device, const std::string& metric, double from, double to,
                                  std::size_t cap = 0) const;
  nlohmann::json devices_json() const;

 private:
  struct Track {
    std::deque<MetricsSample> samples;
    std::uint32_t misses = 0;
    bool stale = false;
    std::string last_error;
  };
  const DeviceConfig& device(const std::string& id) const;

  std::vector<DeviceConfig> devices_;
  MonitorOptions opts_;
  AlertFn alert_;
  mutable std::mutex mu_;
  std::map<std::string, Track> tracks_;
  std::atomic<std::size_t> rejected_{0};
};

/// HTTP endpoint on a node: GET /metrics returns one sample as JSON.
class NodeAgent {
 public:
  NodeAgent(std::string device, const std::string& host, int port, std::function<MetricsSample(double)> source);
  ~NodeAgent();
  int port() const { return port_; }
  void stop();

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

/// One GET against a device's agent; nullopt with `error` set on failure.
std::optional<MetricsSample> scrape(const DeviceConfig& device, std::string* error = nullptr);

/// Polls every enabled device on its own timer and feeds the monitor.
class Scraper {
 public:
  using Clock = std::function<double()>;
  Scraper(Monitor& monitor, Clock clock = {});
  ~Scraper();
  void stop();

 private:
  Monitor& monitor_;
  Clock clock_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
};

}  // namespace promptreco
