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

#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crank/domain.hpp"
#include "crank/factorization.hpp"
#include "crank/priors.hpp"

namespace crank {

struct ScoringConfig {
  double w = 0.7;                       // weight on affinity; 1 - w on discovery
  double log_base = std::numbers::e;    // base of the positional discount
  // Min-max normalize alpha and gamma across the candidate set before
  // combining. Off by default: the two terms are combined raw.
  bool normalize_terms = false;

  // Throws ConfigError unless 0 <= w <= 1 and log_base > 0, != 1.
  void validate() const;
};

// 1 / log_base(1 + l) for 1-based position l. Throws ConfigError if l < 1.
double position_weight(int l, double log_base = std::numbers::e);

// lambda * sum_l r_l / log_base(1 + l). Throws ConfigError on empty input.
double affinity_score(double lambda, std::span<const double> item_affinities,
                      double log_base = std::numbers::e);

// s_hat * exp(-eta).
double discovery_score(double s_hat, long eta);

// sum_l g_l / log_base(1 + l). Throws ConfigError on empty input.
double discovery_carousel_score(std::span<const double> g_values,
                                double log_base = std::numbers::e);

inline double combined_score(double alpha, double gamma,
                             const ScoringConfig& cfg) {
  return cfg.w * alpha + (1.0 - cfg.w) * gamma;
}

// Per-(user, category) purchase counts.
class EtaTable {
 public:
  void add(const UserId& u, const CategoryId& c, long count);
  long get(const UserId& u, const CategoryId& c) const;  // 0 when absent
  std::size_t size() const { return size_; }

  // Sorted (user, category, eta) rows.
  std::vector<std::tuple<std::string, std::string, long>> rows() const;

 private:
  std::unordered_map<std::string, std::unordered_map<std::string, long>> map_;
  std::size_t size_ = 0;
};

// JSONL rows {"user","category","eta"}.
void write_eta(const EtaTable& t, const std::string& path);
EtaTable load_eta(const std::string& path);
EtaTable parse_eta(std::string_view jsonl);

// User-category affinities and purchase counts behind g(u, c).
class DiscoveryInputs {
 public:
  DiscoveryInputs(std::shared_ptr<const EmbeddingTable> user_category,
                  std::shared_ptr<const EtaTable> eta);

  // Model score when the category is embedded (mean user vector for a cold
  // user); otherwise the user's mean score over embedded categories, or the
  // global mean for a cold user.
  double s_hat(const UserId& u, const CategoryId& c) const;
  long eta(const UserId& u, const CategoryId& c) const { return eta_->get(u, c); }
  double g(const UserId& u, const CategoryId& c) const {
    return discovery_score(s_hat(u, c), eta(u, c));
  }

 private:
  std::shared_ptr<const EmbeddingTable> table_;
  std::shared_ptr<const EtaTable> eta_;
  double global_mean_ = 0.0;
};

struct CarouselScore {
  CarouselId carousel;
  double alpha = 0.0;
  double gamma = 0.0;
  double phi = 0.0;
  double lambda = 0.0;
};

struct ZoneRanking {
  std::vector<CarouselId> zones;        // zone 1 first
  std::vector<CarouselScore> scores;    // parallel to `zones`
};

// Read-only model state consulted by score_carousels.
struct ScoringModel {
  std::shared_ptr<const EmbeddingTable> user_item;
  std::shared_ptr<const DiscoveryInputs> discovery;
  std::shared_ptr<const CategoryMap> catalog;
  const PriorStore* priors = nullptr;
};

// Scores every candidate for `user`. Items without an embedding contribute
// r = 0; an item missing from the catalog throws LookupError. Each (user,
// carousel) prior is read once per call, so duplicate candidates always see
// the same lambda.
std::vector<CarouselScore> score_carousels(const UserId& user,
                                           std::span<const Carousel> candidates,
                                           const ScoringModel& model,
                                           const ScoringConfig& cfg);

// Sort by phi descending, ties by carousel id ascending, keep min(Z, n).
ZoneRanking rank_carousels(std::span<const CarouselScore> scores, int zones,
                           const ScoringConfig& cfg);

}  // namespace crank
