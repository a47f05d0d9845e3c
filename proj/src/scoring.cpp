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

#include "crank/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace crank {

void ScoringConfig::validate() const {
  if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("w must lie in [0, 1]");
  if (!(log_base > 0.0) || log_base == 1.0 || !std::isfinite(log_base)) {
    throw ConfigError("log_base must be positive and != 1");
  }
}

double position_weight(int l, double log_base) {
  if (l < 1) throw ConfigError("position must be >= 1");
  return std::log(log_base) / std::log1p(static_cast<double>(l));
}

double affinity_score(double lambda, std::span<const double> item_affinities,
                      double log_base) {
  if (item_affinities.empty()) throw ConfigError("carousel has no items");
  double sum = 0.0;
  for (std::size_t l = 0; l < item_affinities.size(); ++l) {
    sum += item_affinities[l] * position_weight(static_cast<int>(l + 1), log_base);
  }
  return lambda * sum;
}

double discovery_score(double s_hat, long eta) {
  if (eta < 0) throw ConfigError("eta must be non-negative");
  return s_hat * std::exp(-static_cast<double>(eta));
}

double discovery_carousel_score(std::span<const double> g_values,
                                double log_base) {
  if (g_values.empty()) throw ConfigError("carousel has no items");
  double sum = 0.0;
  for (std::size_t l = 0; l < g_values.size(); ++l) {
    sum += g_values[l] * position_weight(static_cast<int>(l + 1), log_base);
  }
  return sum;
}

void EtaTable::add(const UserId& u, const CategoryId& c, long count) {
  if (count < 0) throw ConfigError("eta must be non-negative");
  auto [it, inserted] = map_[u.str()].try_emplace(c.str(), 0);
  if (inserted) ++size_;
  it->second += count;
}

long EtaTable::get(const UserId& u, const CategoryId& c) const {
  auto user = map_.find(u.str());
  if (user == map_.end()) return 0;
  auto cat = user->second.find(c.str());
  return cat == user->second.end() ? 0 : cat->second;
}

std::vector<std::tuple<std::string, std::string, long>> EtaTable::rows() const {
  std::vector<std::tuple<std::string, std::string, long>> out;
  out.reserve(size_);
  for (const auto& [u, cats] : map_) {
    for (const auto& [c, n] : cats) out.emplace_back(u, c, n);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_eta(const EtaTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& [u, c, n] : t.rows()) {
    nlohmann::ordered_json obj;
    obj["user"] = u;
    obj["category"] = c;
    obj["eta"] = n;
    out << obj.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

EtaTable parse_eta(std::string_view jsonl) {
  EtaTable t;
  std::size_t pos = 0, line_no = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto obj = nlohmann::json::parse(line, nullptr, false);
    const std::string where = "eta line " + std::to_string(line_no);
    if (obj.is_discarded() || !obj.is_object()) {
      throw ParseError("", where + ": malformed JSON");
    }
    if (!obj.contains("user") || !obj["user"].is_string()) {
      throw ParseError("user", where + ": missing 'user'");
    }
    if (!obj.contains("category") || !obj["category"].is_string()) {
      throw ParseError("category", where + ": missing 'category'");
    }
    if (!obj.contains("eta") || !obj["eta"].is_number_integer() ||
        obj["eta"].get<long>() < 0) {
      throw ParseError("eta", where + ": 'eta' must be a non-negative integer");
    }
    t.add(UserId(obj["user"].get<std::string>()),
          CategoryId(obj["category"].get<std::string>()),
          obj["eta"].get<long>());
  }
  return t;
}

EtaTable load_eta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_eta(ss.str());
}

DiscoveryInputs::DiscoveryInputs(
    std::shared_ptr<const EmbeddingTable> user_category,
    std::shared_ptr<const EtaTable> eta)
    : table_(std::move(user_category)), eta_(std::move(eta)) {
  if (!table_ || !eta_) throw ConfigError("discovery inputs are incomplete");
  global_mean_ = table_->mean_row().dot(table_->mean_col());
}

double DiscoveryInputs::s_hat(const UserId& u, const CategoryId& c) const {
  const auto row = table_->row_index(u.str());
  if (auto col = table_->col_index(c.str())) {
    auto y = table_->col_factors().row(static_cast<Eigen::Index>(*col));
    if (row) {
      return table_->row_factors().row(static_cast<Eigen::Index>(*row)).dot(y);
    }
    return table_->mean_row().dot(y.transpose());
  }
  if (row) {
    return table_->row_factors()
        .row(static_cast<Eigen::Index>(*row))
        .dot(table_->mean_col().transpose());
  }
  return global_mean_;
}

namespace {

void min_max_normalize(std::vector<CarouselScore>& scores, double CarouselScore::*field) {
  if (scores.empty()) return;
  double lo = scores.front().*field, hi = lo;
  for (const auto& s : scores) {
    lo = std::min(lo, s.*field);
    hi = std::max(hi, s.*field);
  }
  const double span = hi - lo;
  for (auto& s : scores) s.*field = span > 0.0 ? (s.*field - lo) / span : 0.0;
}

}  // namespace

std::vector<CarouselScore> score_carousels(const UserId& user,
                                           std::span<const Carousel> candidates,
                                           const ScoringModel& model,
                                           const ScoringConfig& cfg) {
  if (candidates.empty()) throw ConfigError("no candidate carousels");
  if (!model.user_item || !model.discovery || !model.catalog || !model.priors) {
    throw ConfigError("scoring model is incomplete");
  }
  const EmbeddingTable& items = *model.user_item;

  std::size_t max_len = 0;
  for (const auto& c : candidates) max_len = std::max(max_len, c.size());
  std::vector<double> weights(max_len);
  for (std::size_t l = 0; l < max_len; ++l) {
    weights[l] = position_weight(static_cast<int>(l + 1), cfg.log_base);
  }

  // One user vector for the whole request; cold users fall back to the mean.
  Vector user_vec = items.mean_row();
  if (auto row = items.row_index(user.str())) {
    user_vec = items.row_factors().row(static_cast<Eigen::Index>(*row)).transpose();
  }

  std::unordered_map<CarouselId, double> lambda_cache;
  std::unordered_map<CategoryId, double> g_cache;

  std::vector<CarouselScore> out;
  out.reserve(candidates.size());
  for (const auto& carousel : candidates) {
    auto [lit, fresh] = lambda_cache.try_emplace(carousel.id(), 0.0);
    if (fresh) {
      lit->second = expected_lambda(model.priors->get_or_init(user, carousel.id()));
    }
    const double lambda = lit->second;

    double affinity_sum = 0.0;
    double discovery_sum = 0.0;
    const auto& ids = carousel.items();
    for (std::size_t l = 0; l < ids.size(); ++l) {
      const CategoryId& category = model.catalog->category_of(ids[l]);
      double r_hat = 0.0;
      if (auto col = items.col_index(ids[l].str())) {
        r_hat = items.col_factors().row(static_cast<Eigen::Index>(*col)).dot(user_vec);
      }
      auto [git, gfresh] = g_cache.try_emplace(category, 0.0);
      if (gfresh) git->second = model.discovery->g(user, category);
      affinity_sum += r_hat * weights[l];
      discovery_sum += git->second * weights[l];
    }
    CarouselScore s;
    s.carousel = carousel.id();
    s.lambda = lambda;
    s.alpha = lambda * affinity_sum;
    s.gamma = discovery_sum;
    out.push_back(std::move(s));
  }

  if (cfg.normalize_terms) {
    min_max_normalize(out, &CarouselScore::alpha);
    min_max_normalize(out, &CarouselScore::gamma);
  }
  for (auto& s : out) s.phi = combined_score(s.alpha, s.gamma, cfg);
  return out;
}

ZoneRanking rank_carousels(std::span<const CarouselScore> scores, int zones,
                           const ScoringConfig& /*cfg*/) {
  if (zones < 1) throw ConfigError("zones must be >= 1");
  std::vector<const CarouselScore*> order;
  order.reserve(scores.size());
  std::unordered_set<std::string_view> seen;
  for (const auto& s : scores) {
    if (!std::isfinite(s.phi)) {
      throw Error("non-finite score for carousel " + s.carousel.str());
    }
    if (!seen.insert(s.carousel.str()).second) {
      throw ConfigError("duplicate carousel " + s.carousel.str());
    }
    order.push_back(&s);
  }
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(zones),
                                                 order.size());
  auto better = [](const CarouselScore* x, const CarouselScore* y) {
    if (x->phi != y->phi) return x->phi > y->phi;
    return x->carousel < y->carousel;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                    order.end(), better);

  ZoneRanking out;
  out.zones.reserve(keep);
  out.scores.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.zones.push_back(order[i]->carousel);
    out.scores.push_back(*order[i]);
  }
  return out;
}

}  // namespace crank
