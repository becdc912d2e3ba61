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

#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "promptreco/conditions.hpp"

using namespace promptreco;

namespace {

CalibrationStats stats_with(std::uint64_t n, double ped = 1.0, double gain = 2.0) {
  CalibrationStats s;
  s.subsystems.resize(1);
  for (std::uint64_t i = 0; i < n; ++i) {
    double a = 0.5 + static_cast<double>(i % 17) * 0.1;
    s.subsystems[0].add(a, gain * a + ped);
  }
  return s;
}

RollingCalibration cal_at(std::uint32_t run, double ped = 0.0) {
  auto c = RollingCalibration::identity(2, RunId(run));
  c.constants[0].pedestal = ped;
  c.samples = 100;
  return c;
}

bool approx_equal(const SubsystemStats& a, const SubsystemStats& b) {
  auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max({1.0, std::abs(x), std::abs(y)}); };
  return a.count == b.count && close(a.sum_amp, b.sum_amp) && close(a.sum_amp2, b.sum_amp2) &&
         close(a.sum_resp, b.sum_resp) && close(a.sum_resp2, b.sum_resp2) && close(a.sum_amp_resp, b.sum_amp_resp);
}

}  // namespace

TEST_CASE("accumulate and merge") {
  auto e = generate_events(RunId(1), 1, 1.0, DetectorTruth{}, 256)[0];
  auto s = accumulate({}, e);
  CHECK(s.samples() == 1);
  CHECK(s.subsystems.size() == 4);

  // merge(accumulate(a,e), b) == accumulate(merge(a,b), e), up to floating round-off.
  auto events = generate_events(RunId(2), 300, 60.0, DetectorTruth{}, 256);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    CalibrationStats a, b;
    for (int i = 0; i < 20; ++i) {
      const auto& ev = events[rng() % events.size()];
      if (rng() % 2) a = accumulate(a, ev);
      else b = accumulate(b, ev);
    }
    const auto& x = events[rng() % events.size()];
    auto lhs = merge(accumulate(a, x), b);
    auto rhs = accumulate(merge(a, b), x);
    for (std::size_t k = 0; k < lhs.subsystems.size(); ++k) REQUIRE(approx_equal(lhs.subsystems[k], rhs.subsystems[k]));
    auto ab = merge(a, b), ba = merge(b, a);
    for (std::size_t k = 0; k < ab.subsystems.size(); ++k) REQUIRE(approx_equal(ab.subsystems[k], ba.subsystems[k]));
  }
}

TEST_CASE("least-squares fit recovers the truth within 3 standard errors") {
  DetectorTruth truth;
  truth.noise_sigma = 0.1;
  auto events = generate_events(RunId(1), 10000, 3600.0, truth, 256);
  CalibrationStats stats;
  for (const auto& e : events) stats = accumulate(std::move(stats), e);

  for (std::size_t s = 0; s < truth.subsystems(); ++s) {
    // Oracle: mean-centred two-pass least squares over the raw samples.
    double mx = 0, my = 0;
    for (const auto& e : events) {
      mx += e.readings[s].pulse_amplitude;
      my += e.readings[s].pulse_response;
    }
    const double n = static_cast<double>(events.size());
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (const auto& e : events) {
      double dx = e.readings[s].pulse_amplitude - mx;
      sxx += dx * dx;
      sxy += dx * (e.readings[s].pulse_response - my);
    }
    double gain = sxy / sxx, ped = my - gain * mx;
    double rss = 0;
    for (const auto& e : events) {
      double r = e.readings[s].pulse_response - (gain * e.readings[s].pulse_amplitude + ped);
      rss += r * r;
    }
    double s2 = rss / (n - 2);
    double gain_se = std::sqrt(s2 / sxx), ped_se = std::sqrt(s2 * (1 / n + mx * mx / sxx));

    auto fit = stats.subsystems[s].fit();
    REQUIRE(fit);
    CHECK(fit->gain == doctest::Approx(gain).epsilon(1e-9));
    CHECK(fit->pedestal == doctest::Approx(ped).epsilon(1e-9));
    CHECK(fit->gain_se == doctest::Approx(gain_se).epsilon(1e-6));
    CHECK(fit->pedestal_se == doctest::Approx(ped_se).epsilon(1e-6));
    CHECK(std::abs(fit->gain - truth.gain_at(RunId(1), s)) < 3 * gain_se);
    CHECK(std::abs(fit->pedestal - truth.pedestal_at(RunId(1), s)) < 3 * ped_se);
  }
  CHECK_FALSE(SubsystemStats{}.fit());
}

TEST_CASE("prompt-calibration sampling is fixed-rate in run time") {
  auto count = [](std::uint32_t n, double duration, double interval) {
    auto events = generate_events(RunId(5), n, duration, DetectorTruth{}, 128);
    PcSampler sampler(interval);
    std::size_t kept = 0;
    std::set<std::int64_t> buckets;  // oracle: number of occupied buckets
    for (const auto& e : events) {
      kept += sampler.accept(e);
      buckets.insert(static_cast<std::int64_t>(std::floor(e.timestamp_s() / interval)));
    }
    CHECK(kept == buckets.size());
    return kept;
  };
  auto a = count(20000, 3600.0, 1.0);
  auto b = count(40000, 3600.0, 1.0);
  CHECK(a > 3550);
  CHECK(a <= 3600);
  CHECK(b <= 3600);
  // Doubling the event rate only fills the few buckets the lower rate left empty.
  CHECK(b >= a);
  CHECK(b - a < 3600 - 3550);
  CHECK(count(50, 10.0, 100.0) == 1);
}

TEST_CASE("rolling window merges only as far back as needed") {
  std::vector<RunStats> window = {{RunId(8), stats_with(3600)}, {RunId(9), stats_with(3600)}};
  auto one = roll(window, 100);
  REQUIRE(one);
  CHECK(one->source_first == RunId(9));
  CHECK(one->validity_start == RunId(9));
  CHECK(one->constants[0].gain == doctest::Approx(2.0));
  CHECK(one->constants[0].pedestal == doctest::Approx(1.0));

  std::vector<RunStats> thin = {{RunId(1), stats_with(60)}, {RunId(2), stats_with(60)}, {RunId(3), stats_with(60)}};
  auto two = roll(thin, 100);
  REQUIRE(two);
  CHECK(two->source_first == RunId(2));
  CHECK(two->source_last == RunId(3));
  CHECK(two->validity_start == RunId(3));
  CHECK(two->samples == 120);

  auto all = roll(thin, 180);
  REQUIRE(all);
  CHECK(all->source_first == RunId(1));
  CHECK_FALSE(roll(thin, 181));
  CHECK_FALSE(roll({}, 1));
}

TEST_CASE("calibration documents are self-checking") {
  auto c = cal_at(12, 0.125);
  auto text = c.encode();
  CHECK(RollingCalibration::decode(text) == c);
  auto bad = text;
  bad[10] = bad[10] == 'a' ? 'b' : 'a';
  CHECK_THROWS_AS(RollingCalibration::decode(bad), ConditionsError);
  CHECK_THROWS_AS(RollingCalibration::decode("{}"), ConditionsError);
}

TEST_CASE("lookup honours validity intervals") {
  oracle::TempDir dir("cond");
  ConditionsStore store(dir.path());
  store.publish("PC", cal_at(10));
  store.publish("PC", cal_at(12));

  CHECK(store.lookup("PC", RunId(11)).validity_start == RunId(10));
  CHECK(store.lookup("PC", RunId(12)).validity_start == RunId(12));
  CHECK(store.lookup("PC", RunId(12), LookupMode::one_pass).validity_start == RunId(10));
  CHECK(store.lookup("PC", RunId(13), LookupMode::one_pass).validity_start == RunId(12));
  CHECK(store.lookup("PC", RunId(500)).validity_start == RunId(12));
  CHECK_THROWS_AS(store.lookup("PC", RunId(9)), ConditionsMissing);
  CHECK_THROWS_AS(store.lookup("PC", RunId(10), LookupMode::one_pass), ConditionsMissing);
  CHECK_THROWS_AS(store.lookup("ER-farm-1", RunId(12)), ConditionsMissing);
}

TEST_CASE("published entries are immutable and ordered") {
  oracle::TempDir dir("cond");
  ConditionsStore store(dir.path());
  store.publish("PC", cal_at(10));
  auto before = *store.entry_bytes("PC", RunId(10));
  store.publish("PC", cal_at(10));  // identical: no-op
  CHECK_THROWS_AS(store.publish("PC", cal_at(10, 5.0)), ConditionsError);
  CHECK(*store.entry_bytes("PC", RunId(10)) == before);
  store.publish("PC", cal_at(11));
  CHECK_THROWS_AS(store.publish("PC", cal_at(9)), ConditionsError);
  CHECK(store.validity_starts("PC") == std::vector<RunId>{RunId(10), RunId(11)});
  CHECK_THROWS_AS(store.publish("../x", cal_at(20)), ConditionsError);
}

TEST_CASE("conditions transfer copies bytes and is idempotent") {
  oracle::TempDir dir("cond");
  ConditionsStore pc(dir / "pc");
  for (std::uint32_t r = 100; r <= 104; ++r) pc.publish("PC", cal_at(r, 0.01 * r));
  std::vector<RunId> runs;
  for (std::uint32_t r = 100; r <= 104; ++r) runs.emplace_back(r);

  std::vector<std::unique_ptr<ConditionsStore>> er;
  for (int f = 0; f < 4; ++f) {
    er.push_back(std::make_unique<ConditionsStore>(dir / ("er" + std::to_string(f))));
    transfer_conditions(pc, "PC", *er.back(), "ER", runs);
    transfer_conditions(pc, "PC", *er.back(), "ER", runs);
  }
  for (auto r : runs) {
    for (auto& s : er) {
      CHECK(*s->entry_bytes("ER", r) == *pc.entry_bytes("PC", r));
      CHECK(s->lookup("ER", r) == pc.lookup("PC", r));
    }
  }

  ConditionsStore gap(dir / "gap");
  std::vector<RunId> wanted = {RunId(103), RunId(104), RunId(105), RunId(107)};
  try {
    transfer_conditions(pc, "PC", gap, "ER", wanted);
    FAIL("expected partial transfer");
  } catch (const PartialTransferError& e) {
    CHECK(e.missing() == std::vector<RunId>{RunId(105), RunId(107)});
  }
  CHECK(gap.validity_starts("ER") == std::vector<RunId>{RunId(103), RunId(104)});
}

TEST_CASE("timeline partitioning") {
  std::vector<RunId> runs;
  for (std::uint32_t r = 1; r <= 10; ++r) runs.emplace_back(r);
  auto sizes = [](const std::vector<TimelineInterval>& iv) {
    std::vector<std::size_t> out;
    for (const auto& i : iv) out.push_back(i.runs.size());
    return out;
  };
  CHECK(sizes(partition_timeline(runs, 2)) == std::vector<std::size_t>{5, 5});
  CHECK(sizes(partition_timeline(runs, 3)) == std::vector<std::size_t>{4, 3, 3});
  CHECK(sizes(partition_timeline(runs, 10)) == std::vector<std::size_t>(10, 1));
  CHECK_THROWS_AS(partition_timeline(runs, 11), ConfigError);
  CHECK_THROWS_AS(partition_timeline(runs, 0), ConfigError);

  // Containment audit: calibrations rolled inside an interval never use stats from another.
  auto intervals = partition_timeline(runs, 3);
  for (const auto& iv : intervals) {
    std::vector<RunStats> history;
    for (auto r : iv.runs) {
      history.push_back({r, stats_with(60)});
      auto cal = roll(history, 150);
      if (!cal) continue;
      CHECK(cal->source_first >= iv.first);
      CHECK(cal->source_last <= iv.last);
      CHECK(cal->validity_start == r);
    }
  }
  CHECK(intervals[0].last < intervals[1].first);
  CHECK(intervals[1].last < intervals[2].first);
}
