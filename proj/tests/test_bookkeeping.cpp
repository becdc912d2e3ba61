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

#include <random>
#include <sstream>

#include <fmt/format.h>

#include "doctest.h"
#include "oracles.hpp"
#include "promptreco/bookkeeping.hpp"

using namespace promptreco;

namespace {
AttemptCounters good(std::uint64_t read) { return {read, read / 2, read - read / 2, 0, 0}; }
}  // namespace

TEST_CASE("first open is version 0; opening while running conflicts") {
  Bookkeeping bk;
  auto a = bk.open_attempt(RunId(5), Pass::ER, "14.5.2", "er-1", "rc00000005");
  CHECK(a.version == 0);
  CHECK(a.status == AttemptStatus::running);
  CHECK_THROWS_AS(bk.open_attempt(RunId(5), Pass::ER, "14.5.2", "er-2"), ConflictError);
  // The other pass is an independent sequence.
  CHECK(bk.open_attempt(RunId(5), Pass::PC, "14.5.2", "pc-1").version == 0);
}

TEST_CASE("the seventh ER processing of run 13026 is version 6") {
  Bookkeeping bk;
  ProcessingAttempt a;
  for (int i = 0; i < 7; ++i) {
    a = bk.open_attempt(RunId(13026), Pass::ER, "14.5.2", "er-1");
    if (i < 6) bk.close_attempt(a.id, i % 2 ? AttemptStatus::failed : AttemptStatus::done, good(10));
  }
  CHECK(a.version == 6);
  CHECK(fmt::format("V{:02}", a.version) == "V06");
}

TEST_CASE("close is final and checks the counter identity") {
  double t = 100;
  Bookkeeping bk(std::nullopt, [&] { return t; });
  auto a = bk.open_attempt(RunId(2), Pass::ER, "r", "f");
  t = 130;
  CHECK_THROWS_AS(bk.close_attempt(a.id, AttemptStatus::done, {10, 3, 6, 0, 0}), BookkeepingError);
  CHECK(bk.get(a.id)->status == AttemptStatus::running);
  auto closed = bk.close_attempt(a.id, AttemptStatus::done, {10, 3, 6, 1, 2});
  CHECK(closed.end == 130.0);
  CHECK(closed.counters.redelivered == 2);
  CHECK_THROWS_AS(bk.close_attempt(a.id, AttemptStatus::failed), BookkeepingError);
  CHECK(bk.get(a.id)->status == AttemptStatus::done);
  CHECK_THROWS_AS(bk.close_attempt(999, AttemptStatus::done), BookkeepingError);
}

TEST_CASE("failed attempts consume versions") {
  Bookkeeping bk;
  std::vector<std::uint32_t> versions;
  std::mt19937 rng(4);
  for (int i = 0; i < 30; ++i) {
    auto a = bk.open_attempt(RunId(9), Pass::ER, "r", "f");
    versions.push_back(a.version);
    bk.close_attempt(a.id, rng() % 3 ? AttemptStatus::done : AttemptStatus::failed, good(4));
  }
  // Version-sequence oracle: 0, 1, 2, ... with no gaps whatever the outcomes.
  for (std::uint32_t i = 0; i < versions.size(); ++i) CHECK(versions[i] == i);
}

TEST_CASE("latest_good is the highest done version") {
  Bookkeeping bk;
  CHECK(bk.history(RunId(3)).empty());
  CHECK_FALSE(bk.latest_good(RunId(3), Pass::ER));
  for (auto st : {AttemptStatus::done, AttemptStatus::failed, AttemptStatus::done}) {
    auto a = bk.open_attempt(RunId(3), Pass::ER, "r", "f");
    bk.close_attempt(a.id, st, good(2));
  }
  auto g = bk.latest_good(RunId(3), Pass::ER);
  REQUIRE(g);
  CHECK(g->version == 2);
  auto a = bk.open_attempt(RunId(3), Pass::ER, "r", "f");
  bk.close_attempt(a.id, AttemptStatus::aborted);
  CHECK(bk.latest_good(RunId(3), Pass::ER)->version == 2);
  CHECK(bk.history(RunId(3)).size() == 4);
}

TEST_CASE("log replay reproduces the in-memory view") {
  oracle::TempDir dir("bk");
  auto path = dir / "bk.jsonl";
  std::vector<ProcessingAttempt> live;
  {
    Bookkeeping bk(path);
    std::mt19937 rng(8);
    for (int i = 0; i < 40; ++i) {
      RunId run(1 + rng() % 5);
      Pass pass = rng() % 2 ? Pass::PC : Pass::ER;
      if (bk.running(run, pass)) {
        auto r = *bk.running(run, pass);
        bk.close_attempt(r.id, rng() % 2 ? AttemptStatus::done : AttemptStatus::failed, good(rng() % 100));
      } else {
        auto a = bk.open_attempt(run, pass, "rel", "farm", "rc1");
        if (rng() % 4 == 0) bk.mark_suspect(a.id, "qa");
      }
    }
    live = bk.all();
  }
  CHECK(Bookkeeping::replay(path) == live);
  Bookkeeping reopened(path);
  CHECK(reopened.all() == live);
  // Reopening continues the id and version sequences.
  auto a = reopened.open_attempt(RunId(77), Pass::ER, "r", "f");
  CHECK(a.id > live.back().id);
}

TEST_CASE("CSV export has one row per attempt") {
  Bookkeeping bk;
  auto a = bk.open_attempt(RunId(1), Pass::PC, "r", "pc-1");
  bk.close_attempt(a.id, AttemptStatus::done, {});
  bk.open_attempt(RunId(2), Pass::ER, "r", "er-1", "rc00000001");
  std::ostringstream out;
  bk.export_csv(out);
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].rfind("id,run,pass,version", 0) == 0);
  CHECK(lines[2].find(",ER,0,r,er-1,rc00000001,") != std::string::npos);
}
