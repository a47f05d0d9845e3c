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

#include "crank/priors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace crank {

BetaPrior make_prior(double a, double b) {
  if (!(std::isfinite(a) && std::isfinite(b) && a > 0.0 && b > 0.0)) {
    throw ConfigError("beta prior requires a > 0 and b > 0");
  }
  return {a, b};
}

BetaPrior update_prior(const BetaPrior& p, std::optional<EventType> e) {
  if (!e) return p;
  switch (*e) {
    case EventType::kClick:
    case EventType::kAtc:
      return {p.a + 1.0, p.b};
    case EventType::kView:
      return {p.a, p.b + 1.0};
  }
  return p;
}

BetaPrior fold_events(const BetaPrior& p, std::span<const EventType> events) {
  BetaPrior out = p;
  for (EventType e : events) out = update_prior(out, e);
  return out;
}

std::size_t PriorKeyHash::operator()(const PriorKey& k) const noexcept {
  std::size_t h = std::hash<std::string>{}(k.user.str());
  return h ^ (std::hash<std::string>{}(k.carousel.str()) + 0x9e3779b97f4a7c15ULL +
              (h << 6) + (h >> 2));
}

PriorStore::PriorStore(BetaPrior initial)
    : initial_(make_prior(initial.a, initial.b)) {}

PriorStore::Shard& PriorStore::shard_for(const PriorKey& key) const {
  return shards_[PriorKeyHash{}(key) % kShards];
}

BetaPrior PriorStore::get_or_init(const UserId& u, const CarouselId& k) const {
  PriorKey key{u, k};
  Shard& shard = shard_for(key);
  std::shared_lock lock(shard.mu);
  auto it = shard.map.find(key);
  return it == shard.map.end() ? initial_ : it->second;
}

void PriorStore::set(const UserId& u, const CarouselId& k, const BetaPrior& p) {
  BetaPrior checked = make_prior(p.a, p.b);
  PriorKey key{u, k};
  Shard& shard = shard_for(key);
  std::unique_lock lock(shard.mu);
  shard.map.insert_or_assign(std::move(key), checked);
}

BetaPrior PriorStore::apply(const UserId& u, const CarouselId& k, EventType e) {
  PriorKey key{u, k};
  Shard& shard = shard_for(key);
  std::unique_lock lock(shard.mu);
  auto [it, inserted] = shard.map.try_emplace(std::move(key), initial_);
  it->second = update_prior(it->second, e);
  return it->second;
}

std::size_t PriorStore::size() const {
  std::size_t n = 0;
  for (auto& shard : shards_) {
    std::shared_lock lock(shard.mu);
    n += shard.map.size();
  }
  return n;
}

void PriorStore::clear() {
  for (auto& shard : shards_) {
    std::unique_lock lock(shard.mu);
    shard.map.clear();
  }
  set_snapshot_meta(0, 0);
}

std::vector<PriorEntry> PriorStore::entries() const {
  std::vector<PriorEntry> out;
  for (auto& shard : shards_) {
    std::shared_lock lock(shard.mu);
    for (const auto& [key, prior] : shard.map) out.push_back({key, prior});
  }
  std::sort(out.begin(), out.end(), [](const PriorEntry& x,
                                       const PriorEntry& y) {
    if (x.key.user != y.key.user) return x.key.user < y.key.user;
    return x.key.carousel < y.key.carousel;
  });
  return out;
}

void PriorStore::copy_from(const PriorStore& other) {
  clear();
  for (const auto& e : other.entries()) {
    set(e.key.user, e.key.carousel, e.prior);
  }
  set_snapshot_meta(other.snapshot_offset(), other.snapshot_ts());
}

std::uint64_t PriorStore::snapshot_offset() const {
  std::lock_guard lock(meta_mu_);
  return snapshot_offset_;
}

std::int64_t PriorStore::snapshot_ts() const {
  std::lock_guard lock(meta_mu_);
  return snapshot_ts_;
}

void PriorStore::set_snapshot_meta(std::uint64_t offset, std::int64_t ts) {
  std::lock_guard lock(meta_mu_);
  snapshot_offset_ = offset;
  snapshot_ts_ = ts;
}

void write_prior_snapshot(const PriorStore& store, const std::string& path) {
  // Write-then-rename so a reader never sees a half-written snapshot.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    for (const auto& e : store.entries()) {
      nlohmann::ordered_json obj;
      obj["user"] = e.key.user.str();
      obj["carousel"] = e.key.carousel.str();
      obj["a"] = e.prior.a;
      obj["b"] = e.prior.b;
      out << obj.dump() << '\n';
    }
    out.flush();
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

void parse_prior_snapshot(PriorStore& store, std::string_view jsonl) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto obj = nlohmann::json::parse(line, nullptr, false);
    const std::string where = "prior snapshot line " + std::to_string(line_no);
    if (obj.is_discarded() || !obj.is_object()) {
      throw ParseError("", where + ": malformed JSON");
    }
    for (const char* f : {"user", "carousel"}) {
      if (!obj.contains(f) || !obj[f].is_string()) {
        throw ParseError(f, where + ": missing '" + f + "'");
      }
    }
    for (const char* f : {"a", "b"}) {
      if (!obj.contains(f) || !obj[f].is_number()) {
        throw ParseError(f, where + ": missing '" + f + "'");
      }
    }
    store.set(UserId(obj["user"].get<std::string>()),
              CarouselId(obj["carousel"].get<std::string>()),
              make_prior(obj["a"].get<double>(), obj["b"].get<double>()));
  }
}

void load_prior_snapshot(PriorStore& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  parse_prior_snapshot(store, ss.str());
}

}  // namespace crank
