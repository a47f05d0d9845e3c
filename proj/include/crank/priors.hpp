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

#pragma once

#include <array>
#include <cstdint>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crank/domain.hpp"

namespace crank {

// Beta(a, b) over a user's propensity to engage with a carousel.
struct BetaPrior {
  double a = 1.0;
  double b = 1.0;

  friend bool operator==(const BetaPrior&, const BetaPrior&) = default;
};

// Throws ConfigError unless a > 0 and b > 0 (and both finite).
BetaPrior make_prior(double a, double b);

// a / (a + b).
inline double expected_lambda(const BetaPrior& p) { return p.a / (p.a + p.b); }

// click/atc -> (a+1, b); view -> (a, b+1); nullopt -> unchanged.
BetaPrior update_prior(const BetaPrior& p, std::optional<EventType> e);

BetaPrior fold_events(const BetaPrior& p, std::span<const EventType> events);

struct PriorKey {
  UserId user;
  CarouselId carousel;

  friend bool operator==(const PriorKey&, const PriorKey&) = default;
};

struct PriorKeyHash {
  std::size_t operator()(const PriorKey& k) const noexcept;
};

struct PriorEntry {
  PriorKey key;
  BetaPrior prior;
};

// Concurrent (user, carousel) -> BetaPrior map. Keys are striped over
// shards, each guarded by a shared_mutex, so every per-key update is an
// atomic read-modify-write and readers of other shards never wait.
// Absent keys read as the initial prior without being inserted.
class PriorStore {
 public:
  explicit PriorStore(BetaPrior initial = {1.0, 1.0});

  PriorStore(const PriorStore&) = delete;
  PriorStore& operator=(const PriorStore&) = delete;

  const BetaPrior& initial() const { return initial_; }

  BetaPrior get_or_init(const UserId& u, const CarouselId& k) const;
  void set(const UserId& u, const CarouselId& k, const BetaPrior& p);
  // Applies update_prior under the key's lock and returns the new value.
  BetaPrior apply(const UserId& u, const CarouselId& k, EventType e);

  std::size_t size() const;
  void clear();

  // Copy of every stored entry, sorted by (user, carousel) for stable output.
  std::vector<PriorEntry> entries() const;

  void copy_from(const PriorStore& other);

  // Snapshot metadata: the event-log offset and timestamp the stored state
  // corresponds to.
  std::uint64_t snapshot_offset() const;
  std::int64_t snapshot_ts() const;
  void set_snapshot_meta(std::uint64_t offset, std::int64_t ts);

 private:
  static constexpr std::size_t kShards = 64;

  struct Shard {
    mutable std::shared_mutex mu;
    std::unordered_map<PriorKey, BetaPrior, PriorKeyHash> map;
  };

  Shard& shard_for(const PriorKey& key) const;

  BetaPrior initial_;
  mutable std::array<Shard, kShards> shards_;
  mutable std::mutex meta_mu_;
  std::uint64_t snapshot_offset_ = 0;
  std::int64_t snapshot_ts_ = 0;
};

inline BetaPrior get_or_init(const PriorStore& store, const UserId& u,
                             const CarouselId& k) {
  return store.get_or_init(u, k);
}

// Prior snapshot JSONL: {"user","carousel","a","b"} per line.
void write_prior_snapshot(const PriorStore& store, const std::string& path);
void load_prior_snapshot(PriorStore& store, const std::string& path);
void parse_prior_snapshot(PriorStore& store, std::string_view jsonl);

}  // namespace crank
