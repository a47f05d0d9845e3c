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
#include <random>
#include <thread>

#include "crank/priors.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace crank;

namespace {

BetaPrior random_prior(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(1e-3, 500.0);
  return {d(rng), d(rng)};
}

std::vector<EventType> random_events(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> pick(0, 2);
  std::vector<EventType> out(n);
  for (auto& e : out) e = static_cast<EventType>(pick(rng));
  return out;
}

}  // namespace

TEST_CASE("expected_lambda examples") {
  CHECK(expected_lambda({1, 1}) == 0.5);
  CHECK(expected_lambda({3, 1}) == 0.75);
  CHECK(expected_lambda({2, 3}) == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("update_prior examples") {
  CHECK(update_prior({2, 3}, EventType::kClick) == BetaPrior{3, 3});
  CHECK(update_prior({2, 3}, EventType::kAtc) == BetaPrior{3, 3});
  CHECK(update_prior({2, 3}, EventType::kView) == BetaPrior{2, 4});
  CHECK(update_prior({2, 3}, std::nullopt) == BetaPrior{2, 3});
}

TEST_CASE("update_prior does not mutate its input") {
  const BetaPrior p{2, 3};
  (void)update_prior(p, EventType::kClick);
  CHECK(p == BetaPrior{2, 3});
}

TEST_CASE("fold_events examples") {
  const std::vector<EventType> mixed{EventType::kClick, EventType::kView, EventType::kAtc};
  CHECK(fold_events({1, 1}, mixed) == BetaPrior{3, 2});
  CHECK(fold_events({1, 1}, {}) == BetaPrior{1, 1});
  const std::vector<EventType> views(3, EventType::kView);
  CHECK(fold_events({1, 1}, views) == BetaPrior{1, 4});
}

TEST_CASE("make_prior enforces positive parameters") {
  CHECK_THROWS_AS(make_prior(0, 1), ConfigError);
  CHECK_THROWS_AS(make_prior(1, -1), ConfigError);
  CHECK_THROWS_AS(make_prior(std::nan(""), 1), ConfigError);
  CHECK(make_prior(0.5, 2) == BetaPrior{0.5, 2});
}

TEST_CASE("engagement is strictly monotone and lambda stays in (0,1)") {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 5000; ++n) {
    const auto p = random_prior(rng);
    const double l = expected_lambda(p);
    CHECK(l > 0.0);
    CHECK(l < 1.0);
    CHECK(expected_lambda(update_prior(p, EventType::kClick)) > l);
    CHECK(expected_lambda(update_prior(p, EventType::kAtc)) > l);
    CHECK(expected_lambda(update_prior(p, EventType::kView)) < l);
    CHECK(oracle::rel_err(l, oracle::lambda(p.a, p.b)) <= 1e-15);
  }
}

TEST_CASE("fold_events is order independent and closed under updates") {
  std::mt19937_64 rng(5);
  for (int n = 0; n < 1000; ++n) {
    const auto p = random_prior(rng);
    auto es = random_events(rng, rng() % 40);
    const auto a = fold_events(p, es);
    std::shuffle(es.begin(), es.end(), rng);
    CHECK(fold_events(p, es) == a);
    CHECK(a.a > 0.0);
    CHECK(a.b > 0.0);
    const auto positives = std::count_if(es.begin(), es.end(), [](EventType e) {
      return e != EventType::kView;
    });
    // Exact counts, up to the rounding of repeated +1 on a non-integer start.
    const auto n_pos = static_cast<double>(positives);
    const auto n_neg = static_cast<double>(es.size()) - n_pos;
    CHECK(oracle::rel_err(a.a, static_cast<double>(oracle::hp(p.a) + n_pos)) <= 1e-14);
    CHECK(oracle::rel_err(a.b, static_cast<double>(oracle::hp(p.b) + n_neg)) <= 1e-14);
  }
}

TEST_CASE("get_or_init examples") {
  PriorStore empty;
  CHECK(get_or_init(empty, UserId("u1"), CarouselId("c1")) == BetaPrior{1, 1});
  CHECK(empty.size() == 0);

  PriorStore store;
  store.set(UserId("u1"), CarouselId("c1"), {4, 2});
  CHECK(get_or_init(store, UserId("u1"), CarouselId("c1")) == BetaPrior{4, 2});
  CHECK(get_or_init(store, UserId("u1"), CarouselId("c2")) == BetaPrior{1, 1});
  CHECK(store.size() == 1);

  PriorStore custom(BetaPrior{2, 5});
  CHECK(custom.get_or_init(UserId("x"), CarouselId("y")) == BetaPrior{2, 5});
}

TEST_CASE("apply is an atomic read-modify-write under concurrent writers") {
  PriorStore store;
  constexpr int kThreads = 8;
  constexpr int kPerThread = 2000;
  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < kPerThread; ++i) {
        const auto k = CarouselId("k" + std::to_string(i % 4));
        store.apply(UserId("u"), k, (i + t) % 2 ? EventType::kClick : EventType::kView);
        (void)store.get_or_init(UserId("u"), k);
      }
    });
  }
  for (auto& t : threads) t.join();
  double total = 0.0;
  for (const auto& e : store.entries()) total += e.prior.a + e.prior.b - 2.0;
  CHECK(total == kThreads * kPerThread);
}

TEST_CASE("snapshot round-trips through disk") {
  PriorStore store;
  store.set(UserId("u1"), CarouselId("c1"), {4, 2});
  store.set(UserId("u2"), CarouselId("c9"), {1.5, 7.25});
  const auto path =
      (std::filesystem::temp_directory_path() / "crank_test_priors.jsonl").string();
  write_prior_snapshot(store, path);
  PriorStore back;
  load_prior_snapshot(back, path);
  CHECK(back.entries().size() == 2);
  CHECK(back.get_or_init(UserId("u2"), CarouselId("c9")) == BetaPrior{1.5, 7.25});

  PriorStore bad;
  CHECK_THROWS_AS(parse_prior_snapshot(bad, R"({"user":"u","carousel":"c","a":0,"b":1})"),
                  Error);
  CHECK_THROWS_AS(parse_prior_snapshot(bad, "{oops"), ParseError);
}

TEST_CASE("entries are sorted and copy_from replaces contents") {
  PriorStore a;
  a.set(UserId("u2"), CarouselId("c1"), {2, 1});
  a.set(UserId("u1"), CarouselId("c2"), {1, 2});
  a.set(UserId("u1"), CarouselId("c1"), {3, 3});
  const auto es = a.entries();
  REQUIRE(es.size() == 3);
  CHECK(es[0].key.user == UserId("u1"));
  CHECK(es[0].key.carousel == CarouselId("c1"));
  CHECK(es[2].key.user == UserId("u2"));

  PriorStore b;
  b.set(UserId("z"), CarouselId("z"), {9, 9});
  b.copy_from(a);
  CHECK(b.size() == 3);
  CHECK(b.get_or_init(UserId("z"), CarouselId("z")) == BetaPrior{1, 1});
}
