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

#include <filesystem>
#include <fstream>
#include <random>

#include "crank/pipeline.hpp"
#include "doctest.h"

using namespace crank;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "crank_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

InteractionEvent ev(std::int64_t ts, const std::string& user, const std::string& carousel,
                    EventType type, const std::string& item) {
  InteractionEvent e;
  e.ts = ts;
  e.user = UserId(user);
  e.carousel = CarouselId(carousel);
  e.event = type;
  if (!item.empty()) e.item = ItemId(item);
  return e;
}

struct Fixture {
  CategoryMap catalog;
  std::vector<InteractionEvent> events;

  Fixture() {
    for (int i = 0; i < 12; ++i) {
      catalog.insert(ItemId("i" + std::to_string(i)), CategoryId("c" + std::to_string(i % 3)));
    }
    std::mt19937_64 rng(21);
    std::int64_t ts = 1'700'000'000;
    for (int n = 0; n < 400; ++n) {
      ts += static_cast<std::int64_t>(rng() % 900);
      const auto user = "u" + std::to_string(rng() % 8);
      const auto item = "i" + std::to_string(rng() % 12);
      const auto type = static_cast<EventType>(rng() % 3);
      events.push_back(ev(ts, user, "k" + std::to_string(rng() % 4), type,
                          type == EventType::kView ? "" : item));
    }
  }

  TrainOptions options() const {
    TrainOptions o;
    o.als.dim = 3;
    o.als.iterations = 5;
    o.als.seed = 7;
    return o;
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("train_model counts purchases per user and category") {
  Fixture f;
  const auto model = train_model(f.events, f.catalog, f.options());
  std::map<std::pair<std::string, std::string>, long> want;
  for (const auto& e : f.events) {
    if (e.event == EventType::kAtc) {
      ++want[{e.user.str(), f.catalog.category_of(*e.item).str()}];
    }
  }
  for (const auto& [key, n] : want) {
    CHECK(model.eta.get(UserId(key.first), CategoryId(key.second)) == n);
  }
  CHECK(model.eta.size() == want.size());
  CHECK(model.user_item.dim() == 3);
  CHECK(model.catalog.size() == f.catalog.size());
}

TEST_CASE("category model can use its own configuration") {
  Fixture f;
  auto opts = f.options();
  TrainConfig cat;
  cat.dim = 2;
  cat.iterations = 3;
  opts.category_als = cat;
  const auto model = train_model(f.events, f.catalog, opts);
  CHECK(model.user_item.dim() == 3);
  CHECK(model.user_category.dim() == 2);
}

TEST_CASE("train_model rejects events for items outside the catalog") {
  Fixture f;
  f.events.push_back(ev(1'800'000'000, "u1", "k1", EventType::kAtc, "nope"));
  CHECK_THROWS_AS(train_model(f.events, f.catalog, f.options()), LookupError);
}

TEST_CASE("seed_priors folds sessionized history from the initial prior") {
  const std::vector<InteractionEvent> es{
      ev(100, "u", "k", EventType::kClick, "i1"), ev(110, "u", "k", EventType::kClick, "i2"),
      ev(120, "u", "k", EventType::kView, ""), ev(9000, "u", "k", EventType::kAtc, "i1"),
      ev(50, "v", "k", EventType::kView, "")};
  const auto priors = seed_priors(es, SessionRule{}, {1, 1});
  std::map<std::string, BetaPrior> by_user;
  for (const auto& p : priors) by_user[p.key.user.str()] = p.prior;
  CHECK(by_user["u"] == BetaPrior{3, 2});
  CHECK(by_user["v"] == BetaPrior{1, 2});
}

TEST_CASE("seed_priors tolerates interleaved users in file order") {
  const std::vector<InteractionEvent> es{
      ev(300, "u", "k", EventType::kClick, "i1"), ev(100, "v", "k", EventType::kView, ""),
      ev(100, "u", "k", EventType::kView, ""), ev(200, "v", "k", EventType::kAtc, "i1")};
  const auto priors = seed_priors(es, SessionRule{}, {1, 1});
  REQUIRE(priors.size() == 2);
  for (const auto& p : priors) CHECK(p.prior == BetaPrior{2, 2});
}

TEST_CASE("write_model produces verifiable, deterministic artifacts") {
  Fixture f;
  const auto a = fresh_dir("a");
  const auto b = fresh_dir("b");
  write_model(train_model(f.events, f.catalog, f.options()), a);
  write_model(train_model(f.events, f.catalog, f.options()), b);
  const auto sums = verify_manifest(a);
  CHECK(sums.size() == kArtifactFiles.size());
  for (auto name : kArtifactFiles) {
    const auto pa = (fs::path(a) / name).string();
    CHECK(fs::exists(pa));
    CHECK(sums.at(std::string(name)) == file_checksum(pa));
    CHECK(slurp(pa) == slurp((fs::path(b) / name).string()));
  }
}

TEST_CASE("verify_manifest names a corrupted or missing artifact") {
  Fixture f;
  const auto dir = fresh_dir("corrupt");
  write_model(train_model(f.events, f.catalog, f.options()), dir);
  {
    std::ofstream out(fs::path(dir) / kEtaFile, std::ios::app | std::ios::binary);
    out << "x";
  }
  try {
    verify_manifest(dir);
    FAIL("expected Error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(std::string(kEtaFile)) != std::string::npos);
  }
  const auto dir2 = fresh_dir("missing");
  write_model(train_model(f.events, f.catalog, f.options()), dir2);
  fs::remove(fs::path(dir2) / kCatalogFile);
  CHECK_THROWS_AS(verify_manifest(dir2), Error);
  fs::remove(fs::path(dir2) / kManifestFile);
  CHECK_THROWS_AS(verify_manifest(dir2), Error);
}

TEST_CASE("run_training reads files and matches in-memory training") {
  Fixture f;
  const auto dir = fresh_dir("files");
  const auto events_path = (fs::path(dir) / "events.jsonl").string();
  const auto catalog_path = (fs::path(dir) / "catalog_in.jsonl").string();
  {
    std::ofstream out(events_path, std::ios::binary);
    for (const auto& e : f.events) out << serialize_event(e) << "\n";
  }
  write_catalog(f.catalog, catalog_path);
  const auto out = (fs::path(dir) / "model").string();
  run_training(events_path, catalog_path, out, f.options());
  const auto mem = fresh_dir("mem");
  write_model(train_model(f.events, f.catalog, f.options()), mem);
  CHECK(verify_manifest(out) == verify_manifest(mem));
}

TEST_CASE("file_checksum is FNV-1a over the bytes") {
  const auto dir = fresh_dir("fnv");
  const auto p = (fs::path(dir) / "x").string();
  { std::ofstream(p, std::ios::binary) << "a"; }
  CHECK(file_checksum(p) == "af63dc4c8601ec8c");
  { std::ofstream(p, std::ios::binary); }
  CHECK(file_checksum(p) == "cbf29ce484222325");
  CHECK_THROWS_AS(file_checksum((fs::path(dir) / "absent").string()), IoError);
}
