// Copyright 2026 The crank Authors.
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
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "crank/ingestion.hpp"
#include "doctest.h"

using namespace crank;
namespace fs = std::filesystem;

namespace {

std::string fresh_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "crank_test_ingestion";
  fs::create_directories(dir);
  auto p = dir / name;
  fs::remove(p);
  fs::remove(p.string() + ".ckpt");
  return p.string();
}

InteractionEvent ev(std::int64_t ts, const std::string& user, const std::string& carousel,
                    EventType type, const std::string& item = "i1") {
  InteractionEvent e;
  e.ts = ts;
  e.user = UserId(user);
  e.carousel = CarouselId(carousel);
  e.event = type;
  if (type != EventType::kView) e.item = ItemId(item);
  return e;
}

std::map<std::pair<std::string, std::string>, BetaPrior> snapshot(const PriorStore& s) {
  std::map<std::pair<std::string, std::string>, BetaPrior> out;
  for (const auto& e : s.entries()) out[{e.key.user.str(), e.key.carousel.str()}] = e.prior;
  return out;
}

std::vector<InteractionEvent> random_stream(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::vector<InteractionEvent> out;
  std::int64_t ts = 1'000'000;
  for (std::size_t i = 0; i < n; ++i) {
    // Mostly short steps with occasional long pauses, so sessions close.
    ts += rng() % 50 == 0 ? 2000 + static_cast<std::int64_t>(rng() % 5000)
                          : static_cast<std::int64_t>(rng() % 30);
    // A small fraction arrive out of order.
    const std::int64_t t = rng() % 100 == 0 ? ts - static_cast<std::int64_t>(rng() % 600) : ts;
    out.push_back(ev(t, "u" + std::to_string(rng() % 200), "k" + std::to_string(rng() % 10),
                     static_cast<EventType>(rng() % 3), "i" + std::to_string(rng() % 50)));
  }
  return out;
}

}  // namespace

TEST_CASE("sessionize examples") {
  SessionRule rule;
  const std::vector<InteractionEvent> one{ev(0, "u", "c1", EventType::kClick),
                                          ev(10, "u", "c1", EventType::kClick)};
  auto s = sessionize(one, rule);
  REQUIRE(s.size() == 1);
  CHECK(s[0].events == std::vector<CarouselEvent>{{CarouselId("c1"), EventType::kClick}});

  const std::vector<InteractionEvent> two{ev(0, "u", "c1", EventType::kClick),
                                          ev(4000, "u", "c1", EventType::kClick)};
  s = sessionize(two, rule);
  REQUIRE(s.size() == 2);
  CHECK(s[0].events.size() == 1);
  CHECK(s[1].events.size() == 1);
  CHECK(s[1].start_ts == 4000);

  CHECK(sessionize(std::vector<InteractionEvent>{}, rule).empty());
}

TEST_CASE("sessionize splits only on gaps strictly greater than the threshold") {
  SessionRule rule;
  const std::vector<InteractionEvent> at{ev(0, "u", "c", EventType::kView),
                                         ev(1800, "u", "c", EventType::kClick)};
  CHECK(sessionize(at, rule).size() == 1);
  const std::vector<InteractionEvent> past{ev(0, "u", "c", EventType::kView),
                                           ev(1801, "u", "c", EventType::kClick)};
  CHECK(sessionize(past, rule).size() == 2);
}

TEST_CASE("sessionize rejects unsorted or mixed-user input") {
  SessionRule rule;
  const std::vector<InteractionEvent> unsorted{ev(10, "u", "c", EventType::kView),
                                               ev(5, "u", "c", EventType::kView)};
  CHECK_THROWS_AS(sessionize(unsorted, rule), ConfigError);
  const std::vector<InteractionEvent> mixed{ev(1, "u", "c", EventType::kView),
                                            ev(2, "v", "c", EventType::kView)};
  CHECK_THROWS_AS(sessionize(mixed, rule), ConfigError);
  SessionRule bad;
  bad.gap_seconds = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("without dedup every raw event is passed through") {
  SessionRule rule;
  rule.dedup = false;
  const std::vector<InteractionEvent> es{ev(0, "u", "c1", EventType::kClick),
                                         ev(10, "u", "c1", EventType::kClick),
                                         ev(20, "u", "c1", EventType::kView)};
  const auto s = sessionize(es, rule);
  REQUIRE(s.size() == 1);
  CHECK(s[0].events.size() == 3);
}

TEST_CASE("sessionize emits at most three events per carousel and never invents types") {
  std::mt19937_64 rng(9);
  SessionRule rule;
  for (int n = 0; n < 300; ++n) {
    std::vector<InteractionEvent> es;
    std::int64_t ts = 0;
    const std::size_t len = rng() % 60;
    for (std::size_t i = 0; i < len; ++i) {
      ts += static_cast<std::int64_t>(rng() % 1000);
      es.push_back(ev(ts, "u", "k" + std::to_string(rng() % 4), static_cast<EventType>(rng() % 3)));
    }
    std::vector<Session> sessions = sessionize(es, rule);
    std::size_t consumed = 0;
    for (const auto& s : sessions) {
      std::set<std::pair<std::string, int>> input;
      while (consumed < es.size() && es[consumed].ts <= s.end_ts) {
        input.insert({es[consumed].carousel.str(), static_cast<int>(es[consumed].event)});
        ++consumed;
      }
      std::map<std::string, int> per_carousel;
      std::set<std::pair<std::string, int>> output;
      for (const auto& ce : s.events) {
        ++per_carousel[ce.carousel.str()];
        CHECK(output.insert({ce.carousel.str(), static_cast<int>(ce.event)}).second);
      }
      for (const auto& [k, count] : per_carousel) CHECK(count <= 3);
      CHECK(output == input);
    }
    CHECK(consumed == es.size());
  }
}

TEST_CASE("event log assigns offsets and round-trips bytes") {
  const auto path = fresh_path("offsets.jsonl");
  EventLog log(path);
  CHECK(log.size() == 0);
  const auto a = ev(1, "u1", "c1", EventType::kClick);
  const auto b = ev(2, "u1", "c1", EventType::kView);
  CHECK(log.append(a) == 0);
  CHECK(log.append(b) == 1);
  const auto recs = log.read(0, 10);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].offset == 0);
  CHECK(recs[1].line == serialize_event(b));
  CHECK(parse_event(recs[0].line) == a);
  CHECK(log.read(1, 1).empty());

  const std::vector<InteractionEvent> batch{a, b, a};
  CHECK(log.append_batch(batch) == 2);
  CHECK(log.size() == 5);
}

TEST_CASE("event log reopens existing files and truncates a torn tail") {
  const auto path = fresh_path("torn.jsonl");
  {
    EventLog log(path, FsyncPolicy::kEveryAppend);
    log.append(ev(1, "u", "c", EventType::kView));
    log.append(ev(2, "u", "c", EventType::kView));
  }
  {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << R"({"ts":3,"user":"u","car)";
  }
  EventLog log(path);
  CHECK(log.size() == 2);
  CHECK(log.append(ev(4, "u", "c", EventType::kView)) == 2);
  CHECK(parse_event(log.read(2, 3)[0].line).ts == 4);
}

TEST_CASE("apply_feedback folds a click into a fresh prior") {
  const auto path = fresh_path("click.jsonl");
  EventLog log(path);
  log.append(ev(1, "u1", "c1", EventType::kClick));
  PriorStore store;
  FeedbackApplier applier(log, store, SessionRule{});
  const auto r = applier.apply_pending();
  CHECK(r.records == 1);
  CHECK(store.get_or_init(UserId("u1"), CarouselId("c1")) == BetaPrior{2, 1});
  CHECK(applier.checkpoint() == 1);
}

TEST_CASE("replaying an applied range is rejected and leaves the store unchanged") {
  const auto path = fresh_path("replay.jsonl");
  EventLog log(path);
  log.append(ev(1, "u1", "c1", EventType::kClick));
  log.append(ev(2, "u1", "c2", EventType::kView));
  PriorStore store;
  FeedbackApplier applier(log, store, SessionRule{}, path + ".ckpt");
  applier.apply_range(0, 2);
  const auto before = snapshot(store);
  const auto again = applier.apply_range(0, 2);
  CHECK(again.rejected);
  CHECK(snapshot(store) == before);
  // An overlapping range only applies the unseen suffix.
  log.append(ev(3, "u1", "c2", EventType::kClick));
  const auto tail = applier.apply_range(1, 3);
  CHECK_FALSE(tail.rejected);
  CHECK(tail.records == 1);
  CHECK(store.get_or_init(UserId("u1"), CarouselId("c1")) == BetaPrior{2, 1});
  CHECK(store.get_or_init(UserId("u1"), CarouselId("c2")) == BetaPrior{2, 2});
  CHECK_THROWS_AS(applier.apply_range(5, 6), Error);
}

TEST_CASE("checkpoint persists and refuses to regress") {
  const auto path = fresh_path("ckpt.json");
  {
    Checkpoint c(path);
    CHECK(c.offset() == 0);
    c.commit(5);
    CHECK_THROWS_AS(c.commit(4), Error);
  }
  Checkpoint again(path);
  CHECK(again.offset() == 5);
  again.reset(2);
  CHECK(Checkpoint(path).offset() == 2);
}

TEST_CASE("a restarted applier resumes from its checkpoint file") {
  const auto path = fresh_path("resume.jsonl");
  EventLog log(path);
  log.append(ev(1, "u1", "c1", EventType::kClick));
  PriorStore store;
  {
    FeedbackApplier a(log, store, SessionRule{}, path + ".ckpt");
    a.apply_pending();
  }
  log.append(ev(2, "u1", "c1", EventType::kAtc));
  FeedbackApplier b(log, store, SessionRule{}, path + ".ckpt");
  CHECK(b.checkpoint() == 1);
  const auto r = b.apply_pending();
  CHECK(r.records == 1);
  CHECK(store.get_or_init(UserId("u1"), CarouselId("c1")) == BetaPrior{3, 1});
}

TEST_CASE("corrupt records are skipped and counted") {
  const auto path = fresh_path("corrupt.jsonl");
  {
    std::ofstream out(path, std::ios::binary);
    out << R"({"ts":1,"user":"u","carousel":"c","item":"i","event":"purchase"})" << "\n";
    out << R"({"ts":2,"user":"u","carousel":"c","item":"i","event":"like"})" << "\n";
    out << R"({"ts":3,"user":"u","carousel":"c","event":"share"})" << "\n";
  }
  EventLog log(path);
  REQUIRE(log.size() == 3);
  PriorStore store;
  FeedbackApplier applier(log, store, SessionRule{});
  const auto r = applier.apply_pending();
  CHECK(r.skipped == 3);
  CHECK(applier.warnings() == 3);
  CHECK(store.size() == 0);
  CHECK(applier.checkpoint() == 3);
}

TEST_CASE("session dedup limits repeated clicks to one update") {
  const auto path = fresh_path("dedup.jsonl");
  EventLog log(path);
  for (int i = 0; i < 5; ++i) log.append(ev(100 + i, "u", "c", EventType::kClick));
  log.append(ev(10'000, "u", "c", EventType::kClick));  // new session
  PriorStore store;
  FeedbackApplier applier(log, store, SessionRule{});
  applier.apply_pending();
  CHECK(store.get_or_init(UserId("u"), CarouselId("c")) == BetaPrior{3, 1});
}

TEST_CASE("fold-on-close defers updates until the session ends") {
  const auto path = fresh_path("onclose.jsonl");
  EventLog log(path);
  SessionRule rule;
  rule.fold = FoldMode::kOnClose;
  log.append(ev(100, "u", "c", EventType::kClick));
  PriorStore store;
  FeedbackApplier applier(log, store, rule);
  applier.apply_pending();
  CHECK(store.size() == 0);
  log.append(ev(5000, "v", "c", EventType::kView));  // advances the watermark
  applier.apply_pending();
  CHECK(store.get_or_init(UserId("u"), CarouselId("c")) == BetaPrior{2, 1});
  CHECK(store.get_or_init(UserId("v"), CarouselId("c")) == BetaPrior{1, 1});
  applier.flush();
  CHECK(store.get_or_init(UserId("v"), CarouselId("c")) == BetaPrior{1, 2});
}

TEST_CASE("late events join their open session and are counted") {
  SessionTracker t(SessionRule{});
  SessionTracker::Ready ready;
  t.observe(ev(1000, "u", "c", EventType::kClick), ready);
  t.observe(ev(900, "u", "c", EventType::kClick), ready);
  CHECK(t.late_events() == 1);
  CHECK(ready.size() == 1);
}

TEST_CASE("incremental application matches a rebuild from offset 0 for any batching") {
  for (FoldMode mode : {FoldMode::kFirstOccurrence, FoldMode::kOnClose}) {
    const auto path = fresh_path("determinism.jsonl");
    EventLog log(path);
    const auto events = random_stream(17, 20'000);
    SessionRule rule;
    rule.fold = mode;

    PriorStore base;
    base.set(UserId("u1"), CarouselId("k1"), {3.5, 2.25});

    std::vector<std::map<std::pair<std::string, std::string>, BetaPrior>> results;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      PriorStore store;
      store.copy_from(base);
      FeedbackApplier applier(log, store, rule);
      std::mt19937_64 rng(seed);
      std::size_t i = 0;
      while (i < events.size()) {
        const std::size_t n = std::min<std::size_t>(events.size() - i, 1 + rng() % 3000);
        if (log.size() < i + n) {
          log.append_batch(std::span(events).subspan(i, n));
        }
        i += n;
        applier.apply_range(applier.checkpoint(), i);
      }
      applier.flush();
      results.push_back(snapshot(store));
    }
    PriorStore rebuilt;
    if (mode == FoldMode::kFirstOccurrence) {
      rebuild_priors(log, base, rule, rebuilt);
    } else {
      rebuilt.copy_from(base);
      FeedbackApplier replay(log, rebuilt, rule);
      replay.apply_range(0, log.size());
      replay.flush();
    }
    CHECK(log.size() == events.size());
    CHECK(results[0] == results[1]);
    CHECK(results[1] == results[2]);
    CHECK(snapshot(rebuilt) == results[0]);
  }
}

TEST_CASE("applications to distinct keys commute") {
  const auto path = fresh_path("commute.jsonl");
  EventLog log(path);
  log.append(ev(1, "a", "k", EventType::kClick));
  log.append(ev(2, "b", "k", EventType::kView));
  const auto path2 = fresh_path("commute2.jsonl");
  EventLog log2(path2);
  log2.append(ev(1, "b", "k", EventType::kView));
  log2.append(ev(2, "a", "k", EventType::kClick));
  PriorStore s1, s2;
  FeedbackApplier(log, s1, SessionRule{}).apply_pending();
  FeedbackApplier(log2, s2, SessionRule{}).apply_pending();
  CHECK(snapshot(s1) == snapshot(s2));
}

TEST_CASE("background applier raises lambda within one interval") {
  const auto path = fresh_path("background.jsonl");
  EventLog log(path);
  PriorStore store;
  FeedbackApplier applier(log, store, SessionRule{});
  applier.start(std::chrono::milliseconds(20));
  const double before = expected_lambda(store.get_or_init(UserId("u"), CarouselId("k")));
  log.append(ev(1, "u", "k", EventType::kClick));
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (applier.checkpoint() < 1 && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  applier.stop();
  CHECK(expected_lambda(store.get_or_init(UserId("u"), CarouselId("k"))) > before);
}
