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

#include "promptreco/monitor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "promptreco/bytes.hpp"
#include "promptreco/net.hpp"

namespace promptreco {

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"cpu_temp", "cpu_user", "cpu_system", "mem_used", "disk_io", "net_io"};
  return names;
}

namespace {

bool known_metric(std::string_view m) {
  const auto& n = metric_names();
  return std::find(n.begin(), n.end(), m) != n.end();
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ' && c != '\t') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

double wall_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

}  // namespace

std::vector<DeviceConfig> parse_devices(const std::map<std::string, std::string>& kv) {
  std::map<std::string, DeviceConfig> by_id;
  for (const auto& [key, value] : kv) {
    if (key.rfind("device.", 0) != 0) throw ConfigError(fmt::format("unexpected key '{}' in device list", key));
    const auto rest = key.substr(7);
    const auto dot = rest.rfind('.');
    if (dot == std::string::npos || dot == 0) throw ConfigError(fmt::format("malformed device key '{}'", key));
    const auto id = rest.substr(0, dot);
    const auto field = rest.substr(dot + 1);
    auto& d = by_id[id];
    d.id = id;
    if (field == "endpoint") {
      d.endpoint = value;
    } else if (field == "interval_s") {
      try {
        d.interval_s = std::stod(value);
      } catch (const std::exception&) {
        throw ConfigError(fmt::format("device {}: interval_s '{}' is not a number", id, value));
      }
    } else if (field == "metrics") {
      d.metrics = split_list(value);
      for (const auto& m : d.metrics)
        if (!known_metric(m)) throw ConfigError(fmt::format("device {}: unknown metric '{}'", id, m));
    } else {
      throw ConfigError(fmt::format("device {}: unknown field '{}'", id, field));
    }
  }
  std::vector<DeviceConfig> out;
  for (auto& [id, d] : by_id) {
    if (d.endpoint.empty()) throw ConfigError(fmt::format("device {} has no endpoint", id));
    if (!(d.interval_s > 0)) throw ConfigError(fmt::format("device {}: interval_s must be positive", id));
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<DeviceConfig> load_devices(const std::filesystem::path& path) { return parse_devices(read_key_values(path)); }

std::optional<std::string> MetricsSample::invalid() const {
  auto pct = [&](const char* name, double v) -> std::optional<std::string> {
    if (!(v >= 0 && v <= 100)) return fmt::format("{} = {} is outside [0, 100]", name, v);
    return std::nullopt;
  };
  if (device.empty()) return "sample has no device";
  if (!std::isfinite(time)) return "sample time is not finite";
  if (auto e = pct("cpu_user", cpu_user)) return e;
  if (auto e = pct("cpu_system", cpu_system)) return e;
  if (auto e = pct("mem_used", mem_used)) return e;
  if (!(cpu_user + cpu_system <= 100.0 + 1e-9)) return "cpu_user + cpu_system exceeds 100";
  if (!std::isfinite(cpu_temp) || cpu_temp < -50 || cpu_temp > 150) return fmt::format("cpu_temp = {} is implausible", cpu_temp);
  if (!(disk_io >= 0) || !std::isfinite(disk_io)) return "disk_io must be a non-negative rate";
  if (!(net_io >= 0) || !std::isfinite(net_io)) return "net_io must be a non-negative rate";
  return std::nullopt;
}

double MetricsSample::metric(std::string_view name) const {
  if (name == "cpu_temp") return cpu_temp;
  if (name == "cpu_user") return cpu_user;
  if (name == "cpu_system") return cpu_system;
  if (name == "mem_used") return mem_used;
  if (name == "disk_io") return disk_io;
  if (name == "net_io") return net_io;
  throw MonitorError(fmt::format("unknown metric '{}'", name));
}

nlohmann::json MetricsSample::to_json() const {
  return {{"device", device},     {"time", time},         {"cpu_temp", cpu_temp}, {"cpu_user", cpu_user},
          {"cpu_system", cpu_system}, {"mem_used", mem_used}, {"disk_io", disk_io},   {"net_io", net_io}};
}

MetricsSample MetricsSample::from_json(const nlohmann::json& j) {
  MetricsSample s;
  s.device = j.at("device");
  s.time = j.at("time");
  s.cpu_temp = j.at("cpu_temp");
  s.cpu_user = j.at("cpu_user");
  s.cpu_system = j.at("cpu_system");
  s.mem_used = j.at("mem_used");
  s.disk_io = j.at("disk_io");
  s.net_io = j.at("net_io");
  return s;
}

MetricsSample synthesize_sample(const std::string& device, double time, std::uint64_t seed, double load) {
  const auto key = hash64(seed, std::hash<std::string>{}(device), static_cast<std::uint64_t>(std::llround(time * 1000)));
  auto u = [&](std::uint64_t salt) { return unit_interval(mix64(key ^ salt)); };
  load = std::clamp(load, 0.0, 1.0);
  MetricsSample s;
  s.device = device;
  s.time = time;
  s.cpu_user = std::clamp(85.0 * load + 10.0 * (u(1) - 0.5), 0.0, 95.0);
  s.cpu_system = std::clamp(4.0 + 4.0 * u(2), 0.0, 100.0 - s.cpu_user);
  s.cpu_temp = 38.0 + 30.0 * load + 3.0 * u(3);
  s.mem_used = std::clamp(30.0 + 50.0 * load + 5.0 * u(4), 0.0, 100.0);
  s.disk_io = 2e6 * load * (0.5 + u(5));
  s.net_io = 5e6 * load * (0.5 + u(6));
  return s;
}

// -- Monitor ---------------------------------------------------------------------

Monitor::Monitor(std::vector<DeviceConfig> devices, MonitorOptions opts, AlertFn alert)
    : devices_(std::move(devices)), opts_(opts), alert_(std::move(alert)) {
  for (const auto& d : devices_) {
    if (tracks_.count(d.id)) throw ConfigError(fmt::format("duplicate device id '{}'", d.id));
    tracks_[d.id];
  }
}

const DeviceConfig& Monitor::device(const std::string& id) const {
  for (const auto& d : devices_)
    if (d.id == id) return d;
  throw MonitorError(fmt::format("unknown device '{}'", id));
}

bool Monitor::ingest(const MetricsSample& s) {
  auto reject = [&](const std::string& why) {
    ++rejected_;
    spdlog::warn("monitor: rejected sample from {}: {}", s.device, why);
    return false;
  };
  if (auto why = s.invalid()) return reject(*why);
  std::lock_guard lock(mu_);
  auto it = tracks_.find(s.device);
  if (it == tracks_.end()) return reject("unknown device");
  auto& t = it->second;
  if (!t.samples.empty() && s.time <= t.samples.back().time) return reject("time is not after the previous sample");
  t.samples.push_back(s);
  while (!t.samples.empty() && t.samples.front().time < s.time - opts_.retention_s) t.samples.pop_front();
  if (t.stale) spdlog::info("monitor: {} is reporting again", s.device);
  t.misses = 0;
  t.stale = false;
  return true;
}

void Monitor::miss(const std::string& device_id, double time, const std::string& reason) {
  bool raise = false;
  {
    std::lock_guard lock(mu_);
    auto it = tracks_.find(device_id);
    if (it == tracks_.end()) throw MonitorError(fmt::format("unknown device '{}'", device_id));
    auto& t = it->second;
    ++t.misses;
    t.last_error = reason;
    if (!t.stale && t.misses >= opts_.miss_threshold) {
      t.stale = true;
      raise = true;
    }
  }
  if (raise) {
    const auto msg = fmt::format("{} stale after {} missed scrapes at t={:.1f}: {}", device_id, opts_.miss_threshold, time, reason);
    spdlog::warn("monitor: {}", msg);
    if (alert_) alert_("monitor:" + device_id, msg);
  }
}

bool Monitor::stale(const std::string& device_id) const {
  std::lock_guard lock(mu_);
  auto it = tracks_.find(device_id);
  if (it == tracks_.end()) throw MonitorError(fmt::format("unknown device '{}'", device_id));
  return it->second.stale;
}

std::vector<SeriesPoint> Monitor::series(const std::string& device_id, const std::string& metric, double from,
                                         double to, std::size_t cap) const {
  const auto& d = device(device_id);
  if (!known_metric(metric)) throw MonitorError(fmt::format("unknown metric '{}'", metric));
  if (std::find(d.metrics.begin(), d.metrics.end(), metric) == d.metrics.end())
    throw MonitorError(fmt::format("metric '{}' is not enabled for {}", metric, device_id));
  if (cap == 0) cap = opts_.point_cap;
  std::vector<std::pair<double, double>> raw;
  {
    std::lock_guard lock(mu_);
    for (const auto& s : tracks_.at(device_id).samples)
      if (s.time >= from && s.time <= to) raw.emplace_back(s.time, s.metric(metric));
  }
  std::vector<SeriesPoint> out;
  if (raw.empty()) return out;
  const std::size_t per = (raw.size() + cap - 1) / cap;
  for (std::size_t i = 0; i < raw.size(); i += per) {
    const auto end = std::min(raw.size(), i + per);
    SeriesPoint p;
    p.min = p.max = raw[i].second;
    double sum = 0, tsum = 0;
    for (std::size_t k = i; k < end; ++k) {
      sum += raw[k].second;
      tsum += raw[k].first;
      p.min = std::min(p.min, raw[k].second);
      p.max = std::max(p.max, raw[k].second);
    }
    p.samples = end - i;
    p.value = sum / static_cast<double>(p.samples);
    p.time = p.samples == 1 ? raw[i].first : tsum / static_cast<double>(p.samples);
    out.push_back(p);
  }
  return out;
}

nlohmann::json Monitor::devices_json() const {
  std::lock_guard lock(mu_);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : devices_) {
    const auto& t = tracks_.at(d.id);
    out.push_back({
        {"id", d.id},
        {"endpoint", d.endpoint},
        {"interval_s", d.interval_s},
        {"metrics", d.metrics},
        {"stale", t.stale},
        {"misses", t.misses},
        {"last_error", t.last_error},
        {"samples", t.samples.size()},
        {"last_sample", t.samples.empty() ? nlohmann::json() : t.samples.back().to_json()},
    });
  }
  return out;
}

// -- agent and scraper -----------------------------------------------------------

NodeAgent::NodeAgent(std::string device, const std::string& host, int port, std::function<MetricsSample(double)> source)
    : server_(std::make_unique<httplib::Server>()) {
  server_->Get("/metrics", [device, source](const httplib::Request&, httplib::Response& res) {
    auto s = source(wall_now());
    s.device = device;
    res.set_content(s.to_json().dump(), "application/json");
  });
  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw NetError(fmt::format("node agent cannot bind {}:{}", host, port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

NodeAgent::~NodeAgent() { stop(); }

void NodeAgent::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::optional<MetricsSample> scrape(const DeviceConfig& device, std::string* error) {
  auto fail = [&](std::string why) -> std::optional<MetricsSample> {
    if (error) *error = std::move(why);
    return std::nullopt;
  };
  Endpoint ep;
  try {
    ep = Endpoint::parse(device.endpoint);
  } catch (const Error& e) {
    return fail(e.what());
  }
  httplib::Client cli(ep.host, ep.port);
  cli.set_connection_timeout(std::chrono::milliseconds(500));
  cli.set_read_timeout(std::chrono::seconds(2));
  auto res = cli.Get("/metrics");
  if (!res) return fail(fmt::format("no response from {}: {}", device.endpoint, httplib::to_string(res.error())));
  if (res->status != 200) return fail(fmt::format("{} answered HTTP {}", device.endpoint, res->status));
  try {
    auto s = MetricsSample::from_json(nlohmann::json::parse(res->body));
    if (s.device != device.id) return fail(fmt::format("{} reported itself as '{}'", device.id, s.device));
    return s;
  } catch (const std::exception& e) {
    return fail(fmt::format("malformed sample from {}: {}", device.endpoint, e.what()));
  }
}

Scraper::Scraper(Monitor& monitor, Clock clock) : monitor_(monitor), clock_(clock ? std::move(clock) : Clock(wall_now)) {
  for (const auto& d : monitor_.devices()) {
    threads_.emplace_back([this, d] {
      std::unique_lock lock(mu_);
      while (!stop_) {
        lock.unlock();
        std::string err;
        if (auto s = scrape(d, &err)) monitor_.ingest(*s);
        else monitor_.miss(d.id, clock_(), err);
        lock.lock();
        cv_.wait_for(lock, std::chrono::duration<double>(d.interval_s), [this] { return stop_; });
      }
    });
  }
}

Scraper::~Scraper() { stop(); }

void Scraper::stop() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
}

}  // namespace promptreco
