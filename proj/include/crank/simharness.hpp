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

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crank/domain.hpp"
#include "crank/pipeline.hpp"
#include "crank/scoring.hpp"
#include "crank/service.hpp"

namespace crank::sim {

struct WorldConfig {
  int users = 500;
  int categories = 12;
  int items_per_category = 25;
  int carousels = 10;
  int carousel_length = 12;
  // Sessions per user in the generated year of history.
  int history_sessions = 80;
  // Dirichlet concentration of per-user category preferences; small values
  // make users focus on few categories.
  double preference_concentration = 0.3;
  // Per-position click scale and ATC-given-click scale; both multiply the
  // ground-truth affinity.
  double click_scale = 0.3;
  double atc_scale = 0.12;
  // Per-user multiplier on the affinity for categories the user has not yet
  // bought from, drawn uniformly from [low, high].
  double curiosity_low = 0.5;
  double curiosity_high = 1.5;

  void validate() const;
};

struct Item {
  ItemId id;
  int category = 0;
  double quality = 0.0;
};

struct SyntheticWorld {
  WorldConfig cfg;
  std::uint64_t seed = 0;
  std::vector<UserId> users;
  std::vector<CategoryId> categories;
  std::vector<Item> items;
  std::vector<Carousel> carousels;
  std::vector<std::vector<std::size_t>> carousel_items;  // indices into items
  // [user][category] in [0, 1]; 1 for each user's favorite category.
  std::vector<std::vector<double>> preference;
  // Affinity multiplier for categories a user has never bought from.
  std::vector<double> curiosity;
  CategoryMap catalog;
  std::vector<InteractionEvent> history;  // sorted by ts
  std::int64_t now = 0;                   // first simulated session time

  // Ground-truth affinity, ignoring purchase history.
  double affinity(std::size_t user, std::size_t item) const;
  std::size_t item_index_of(std::size_t carousel, std::size_t position) const;
};

// Fully determined by (cfg, seed).
SyntheticWorld generate_world(const WorldConfig& cfg, std::uint64_t seed);

// Writes the world's history as event JSONL and its catalog as catalog JSONL.
void write_world(const SyntheticWorld& world, const std::string& events_path,
                 const std::string& catalog_path);

enum class Policy { kStatic, kDynamic };

std::string_view to_string(Policy p);
Policy parse_policy(std::string_view s);

// Engine settings for the dynamic policy. Alpha and gamma live on different
// scales (alpha carries the lambda factor), so the harness min-max
// normalizes both terms per request; the category model gets a dim that
// fits a dozen categories.
struct SimOptions {
  SimOptions() {
    scoring.normalize_terms = true;
    train.category_als = TrainConfig{};
    train.category_als->dim = 4;
  }

  ScoringConfig scoring;
  TrainOptions train;
  int zones = 10;
};

struct SimReport {
  Policy policy = Policy::kStatic;
  std::uint64_t world_seed = 0;
  std::uint64_t session_seed = 0;
  std::string config_hash;  // world config + seeds + session count
  double w = 0.0;
  std::uint64_t sessions = 0;
  double atc_per_visit = 0.0;
  double item_page_visits_per_visit = 0.0;
  double distinct_new_categories_touched = 0.0;
  double p50_compute_micros = 0.0;
  double p99_compute_micros = 0.0;
  std::uint64_t latency_samples = 0;
};

std::string to_json(const SimReport& r);
SimReport report_from_json(std::string_view text);

// Ordering of every carousel by aggregate ground-truth popularity over all
// users (position-discounted affinity sums), most popular first.
std::vector<std::size_t> static_ordering(const SyntheticWorld& world);

// Trains the dynamic policy's model on the world's history.
TrainedModel train_world_model(const SyntheticWorld& world,
                               const TrainOptions& opts);

// Replays `n_sessions` sessions of uniformly drawn users. The dynamic policy
// ranks through an in-process Engine and folds each session's events back
// into its priors before the next session. Pass `model` to reuse a trained
// model; otherwise one is trained from the world history.
SimReport simulate(const SyntheticWorld& world, Policy policy,
                   std::uint64_t n_sessions, std::uint64_t seed,
                   const SimOptions& opts,
                   const TrainedModel* model = nullptr);

// Zone (1-based) of `carousel` in each of `n_sessions` dynamic sessions of a
// single user, with feedback applied after each session.
std::vector<int> zone_trajectory(const SyntheticWorld& world, std::size_t user,
                                 std::size_t carousel, std::uint64_t n_sessions,
                                 std::uint64_t seed, const SimOptions& opts,
                                 const TrainedModel& model);

struct Lift {
  std::string metric;
  std::optional<double> percent;  // nullopt when the baseline is zero
};

// 100 (b - a) / a per metric. Throws ConfigError if the reports come from
// different worlds or session counts.
std::vector<Lift> compare(const SimReport& a, const SimReport& b);

struct LatencyReport {
  std::uint64_t requests = 0;
  double p50 = 0.0;
  double p95 = 0.0;
  double p99 = 0.0;
  double mean = 0.0;
};

struct BenchOptions {
  std::uint64_t requests = 20000;
  int candidates = 10;
  int items_per_carousel = 20;
  int concurrency = 1;
  std::uint64_t warmup = 100;
  std::uint64_t seed = 1;
};

// Percentiles of Engine::rank compute_micros over `requests` warmed calls
// for random users and random candidate carousels drawn from the engine's
// catalog. Throws ConfigError below 1000 requests.
LatencyReport bench_latency(const Engine& engine, const BenchOptions& opts);

// Nearest-rank percentile of unsorted samples, q in [0, 100].
double percentile(std::vector<double> samples, double q);

}  // namespace crank::sim
