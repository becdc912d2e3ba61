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

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "doctest.h"
#include "oracles.hpp"
#include "promptreco/monitor.hpp"

using namespace promptreco;

namespace {

DeviceConfig dev(const std::string& id, std::string endpoint = "127.0.0.1:1") {
  DeviceConfig d;
  d.id = id;
  d.endpoint = std::move(endpoint);
  d.interval_s = 1;
  return d;
}

MetricsSample healthy(const std::string& id, double t, double user = 40) {
  MetricsSample s;
  s.device = id;
  s.time = t;
  s.cpu_temp = 50;
  s.cpu_user = user;
  s.cpu_system = 5;
  s.mem_used = 60;
  s.disk_io = 1000;
  s.net_io = 2000;
  return s;
}

}  // namespace

TEST_CASE("device list parsing and validation") {
  const auto devs = parse_devices(parse_key_values(
      "device.pc01.endpoint = 127.0.0.1:9101\n"
      "device.pc01.interval_s = 2.5\n"
      "device.er01.endpoint = 127.0.0.1:9102\n"
      "device.er01.metrics = cpu_temp, mem_used\n"));
  REQUIRE(devs.size() == 2);
  CHECK(devs[0].id == "er01");
  CHECK(devs[0].interval_s == 5.0);
  CHECK(devs[0].metrics == std::vector<std::string>{"cpu_temp", "mem_used"});
  CHECK(devs[1].id == "pc01");
  CHECK(devs[1].interval_s == 2.5);
  CHECK(devs[1].metrics.size() == 6);

  CHECK_THROWS_AS(parse_devices(parse_key_values("device.a.endpoint = x:1\ndevice.a.interval_s = 0\n")), ConfigError);
  CHECK_THROWS_AS(parse_devices(parse_key_values("device.a.endpoint = x:1\ndevice.a.interval_s = -1\n")), ConfigError);
  CHECK_THROWS_AS(parse_devices(parse_key_values("device.a.interval_s = 3\n")), ConfigError);
  CHECK_THROWS_AS(parse_devices(parse_key_values("device.a.endpoint = x:1\ndevice.a.metrics = gpu\n")), ConfigError);
  CHECK_THROWS_AS(parse_devices(parse_key_values("device.a.endpoint = x:1\ndevice.a.colour = red\n")), ConfigError);
  CHECK_THROWS_AS(Monitor({dev("a"), dev("a")}), ConfigError);

  oracle::TempDir tmp("mon");
  std::ofstream(tmp / "devices.conf") << "# farm nodes\ndevice.n1.endpoint = 127.0.0.1:9000\n";
  CHECK(load_devices(tmp / "devices.conf").at(0).endpoint == "127.0.0.1:9000");
}

TEST_CASE("out-of-range and out-of-order samples are rejected") {
  Monitor m({dev("n1")});
  CHECK(m.ingest(healthy("n1", 10)));
  auto bad = healthy("n1", 11);
  bad.cpu_user = 150;
  CHECK_FALSE(m.ingest(bad));
  bad = healthy("n1", 11);
  bad.mem_used = -1;
  CHECK_FALSE(m.ingest(bad));
  bad = healthy("n1", 11);
  bad.net_io = -5;
  CHECK_FALSE(m.ingest(bad));
  CHECK_FALSE(m.ingest(healthy("n1", 10)));  // not after the previous
  CHECK_FALSE(m.ingest(healthy("n1", 9)));
  CHECK_FALSE(m.ingest(healthy("ghost", 20)));
  CHECK(m.rejected() == 6);
  CHECK(m.ingest(healthy("n1", 11)));
  CHECK(m.series("n1", "cpu_user", 0, 100).size() == 2);
}

TEST_CASE("synthesized samples are valid and deterministic") {
  for (int i = 0; i < 2000; ++i) {
    const auto s = synthesize_sample("pc" + std::to_string(i % 7), i * 0.5, 99, (i % 11) / 10.0);
    CHECK_FALSE(s.invalid().has_value());
  }
  const auto a = synthesize_sample("x", 3.0, 1), b = synthesize_sample("x", 3.0, 1);
  CHECK(a.to_json() == b.to_json());
  CHECK(MetricsSample::from_json(a.to_json()).to_json() == a.to_json());
}

TEST_CASE("stale after consecutive misses, one alert, recovery") {
  // Miss-count model: stale exactly when the run of trailing misses reaches k.
  std::mt19937_64 rng(5);
  for (std::uint32_t k : {1u, 3u, 5u}) {
    std::vector<std::string> alerts;
    MonitorOptions o;
    o.miss_threshold = k;
    Monitor m({dev("n1")}, o, [&](const std::string& src, const std::string&) { alerts.push_back(src); });
    std::uint32_t run = 0, expected_alerts = 0;
    for (int step = 0; step < 400; ++step) {
      const double t = step + 1;
      if (rng() % 3 == 0) {
        m.ingest(healthy("n1", t));
        run = 0;
      } else {
        m.miss("n1", t, "connection refused");
        ++run;
        if (run == k) ++expected_alerts;
      }
      const bool model_stale = run >= k;
      CHECK(m.stale("n1") == model_stale);
    }
    CHECK(alerts.size() == expected_alerts);
    for (const auto& a : alerts) CHECK(a == "monitor:n1");
  }

  std::vector<std::string> alerts;
  Monitor m({dev("n1")}, {}, [&](const std::string&, const std::string& msg) { alerts.push_back(msg); });
  m.miss("n1", 1, "down");
  m.miss("n1", 2, "down");
  CHECK_FALSE(m.stale("n1"));
  m.miss("n1", 3, "down");
  CHECK(m.stale("n1"));
  for (int i = 4; i < 20; ++i) m.miss("n1", i, "down");
  CHECK(alerts.size() == 1);
  CHECK(m.ingest(healthy("n1", 21)));
  CHECK_FALSE(m.stale("n1"));
  CHECK(m.devices_json()[0]["stale"] == false);
}

TEST_CASE("series: empty, exact, unknown names") {
  auto d = dev("n1");
  d.metrics = {"cpu_user", "mem_used"};
  Monitor m({d});
  CHECK(m.series("n1", "cpu_user", 0, 1e9).empty());
  for (int i = 0; i < 120; ++i) m.ingest(healthy("n1", 100 + i, i % 90));
  const auto s = m.series("n1", "cpu_user", 0, 1e9);
  REQUIRE(s.size() == 120);
  for (int i = 0; i < 120; ++i) {
    CHECK(s[i].time == 100 + i);
    CHECK(s[i].value == i % 90);
    CHECK(s[i].samples == 1);
  }
  CHECK_THROWS_AS(m.series("nope", "cpu_user", 0, 1), MonitorError);
  CHECK_THROWS_AS(m.series("n1", "gpu_load", 0, 1), MonitorError);
  CHECK_THROWS_AS(m.series("n1", "net_io", 0, 1), MonitorError);  // not enabled
}

TEST_CASE("downsampled buckets preserve min and max of the raw samples") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng() % 3000;
    const std::size_t cap = 1 + rng() % 600;
    MonitorOptions o;
    o.point_cap = cap;
    Monitor m({dev("n1")}, o);
    std::vector<std::pair<double, double>> raw;
    double t = 0;
    for (std::size_t i = 0; i < n; ++i) {
      t += 0.1 + static_cast<double>(rng() % 100) / 50.0;
      const double v = static_cast<double>(rng() % 9000) / 100.0;
      m.ingest(healthy("n1", t, v));
      raw.emplace_back(t, v);
    }
    // Random window.
    const double lo = raw[rng() % n].first, hi = std::max(lo, raw[rng() % n].first);
    std::vector<std::pair<double, double>> in;
    for (const auto& r : raw)
      if (r.first >= lo && r.first <= hi) in.push_back(r);
    const auto pts = m.series("n1", "cpu_user", lo, hi);
    CHECK(pts.size() <= cap);
    if (in.size() <= cap) CHECK(pts.size() == in.size());
    std::size_t pos = 0;
    double prev_time = -1;
    for (const auto& p : pts) {
      REQUIRE(p.samples >= 1);
      REQUIRE(pos + p.samples <= in.size());
      double mn = in[pos].second, mx = in[pos].second, sum = 0;
      for (std::size_t k = pos; k < pos + p.samples; ++k) {
        mn = std::min(mn, in[k].second);
        mx = std::max(mx, in[k].second);
        sum += in[k].second;
      }
      CHECK(p.min == mn);
      CHECK(p.max == mx);
      CHECK(p.value == doctest::Approx(sum / p.samples));
      CHECK(p.time >= in[pos].first);
      CHECK(p.time <= in[pos + p.samples - 1].first);
      CHECK(p.time > prev_time);
      prev_time = p.time;
      pos += p.samples;
    }
    CHECK(pos == in.size());
  }
}

TEST_CASE("retention drops old samples and windows never leak") {
  MonitorOptions o;
  o.retention_s = 50;
  Monitor m({dev("n1")}, o);
  for (int i = 0; i < 200; ++i) m.ingest(healthy("n1", i, i % 80));
  const auto all = m.series("n1", "cpu_user", -1e9, 1e9);
  REQUIRE_FALSE(all.empty());
  CHECK(all.front().time >= 199 - 50);
  CHECK(all.back().time == 199);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = static_cast<double>(rng() % 250), b = a + static_cast<double>(rng() % 60);
    for (const auto& p : m.series("n1", "cpu_user", a, b, 7)) {
      CHECK(p.time >= a);
      CHECK(p.time <= b);
    }
  }
}

TEST_CASE("node agents over HTTP feed the scraper") {
  std::atomic<int> served{0};
  NodeAgent a("pc01", "127.0.0.1", 0, [&](double t) {
    ++served;
    return synthesize_sample("pc01", t, 1);
  });
  REQUIRE(a.port() > 0);
  auto d = dev("pc01", fmt::format("127.0.0.1:{}", a.port()));
  d.interval_s = 0.02;

  std::string err;
  auto one = scrape(d, &err);
  REQUIRE(one.has_value());
  CHECK(one->device == "pc01");
  CHECK_FALSE(one->invalid().has_value());

  // A second device whose agent is gone.
  NodeAgent gone("pc02", "127.0.0.1", 0, [](double t) { return synthesize_sample("pc02", t, 1); });
  auto d2 = dev("pc02", fmt::format("127.0.0.1:{}", gone.port()));
  d2.interval_s = 0.02;
  gone.stop();
  CHECK_FALSE(scrape(d2, &err).has_value());
  CHECK_FALSE(err.empty());

  // Agent answering for the wrong device is a miss.
  auto wrong = d;
  wrong.id = "pc99";
  CHECK_FALSE(scrape(wrong, &err).has_value());

  std::vector<std::string> alerts;
  std::mutex amu;
  Monitor m({d, d2}, {}, [&](const std::string& src, const std::string&) {
    std::lock_guard l(amu);
    alerts.push_back(src);
  });
  {
    Scraper s(m);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    while (std::chrono::steady_clock::now() < deadline &&
           (m.series("pc01", "cpu_temp", 0, 1e12).size() < 5 || !m.stale("pc02")))
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  CHECK(m.series("pc01", "cpu_temp", 0, 1e12).size() >= 5);
  CHECK_FALSE(m.stale("pc01"));
  CHECK(m.stale("pc02"));
  std::lock_guard l(amu);
  CHECK(alerts == std::vector<std::string>{"monitor:pc02"});
}
