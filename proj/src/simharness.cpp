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

#include "crank/simharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "json.hpp"

namespace crank::sim {

namespace {

using json = nlohmann::ordered_json;

constexpr std::int64_t kDay = 86400;
constexpr std::int64_t kEpoch = 1'700'000'000;
constexpr int kArchetypes = 4;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator per (seed, purpose).
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  return std::mt19937_64(splitmix(seed ^ splitmix(purpose)));
}

std::vector<double> dirichlet(std::mt19937_64& rng, int n, double conc) {
  std::gamma_distribution<double> g(conc, 1.0);
  std::vector<double> out(n);
  double sum = 0.0;
  for (auto& v : out) {
    v = g(rng);
    sum += v;
  }
  if (sum <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0 / n);
  } else {
    for (auto& v : out) v /= sum;
  }
  return out;
}

// ln 2 / ln(1 + z): 1 at the first slot, decaying like the scoring discount.
double slot_bias(int z) { return std::numbers::ln2 / std::log1p(z); }

struct Interaction {
  std::size_t carousel;
  std::optional<std::size_t> item;
  EventType event;
};

struct UserState {
  std::vector<char> bought;  // per category
};

// One visit: walk the page in zone order and draw views, clicks and ATCs.
// `order` lists carousel indices, zone 1 first.
template <typename Emit>
void visit(const SyntheticWorld& w, std::size_t user, UserState& state,
           std::span<const std::size_t> order, std::mt19937_64& rng,
           Emit&& emit) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t z = 0; z < order.size(); ++z) {
    if (u01(rng) >= slot_bias(static_cast<int>(z + 1))) continue;
    const std::size_t k = order[z];
    emit(Interaction{k, std::nullopt, EventType::kView});
    const auto& items = w.carousels[k].items();
    for (std::size_t l = 0; l < items.size(); ++l) {
      const std::size_t item = w.item_index_of(k, l);
      const int cat = w.items[item].category;
      double a = w.affinity(user, item);
      if (!state.bought[cat]) a *= w.curiosity[user];
      a = std::min(a, 1.0);
      if (u01(rng) >= w.cfg.click_scale * a * slot_bias(static_cast<int>(l + 1))) {
        continue;
      }
      emit(Interaction{k, item, EventType::kClick});
      if (u01(rng) < w.cfg.atc_scale * a) {
        emit(Interaction{k, item, EventType::kAtc});
        state.bought[cat] = 1;
      }
    }
  }
}

std::vector<UserState> initial_states(const SyntheticWorld& w) {
  std::vector<UserState> states(w.users.size());
  for (auto& s : states) s.bought.assign(w.categories.size(), 0);
  std::unordered_map<std::string, std::size_t> user_index;
  for (std::size_t u = 0; u < w.users.size(); ++u) user_index[w.users[u].str()] = u;
  std::unordered_map<std::string, int> item_cat;
  for (const auto& it : w.items) item_cat[it.id.str()] = it.category;
  for (const auto& e : w.history) {
    if (e.event == EventType::kAtc && e.item) {
      states[user_index.at(e.user.str())].bought[item_cat.at(e.item->str())] = 1;
    }
  }
  return states;
}

std::string hash_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::string config_hash(const WorldConfig& c, std::uint64_t world_seed,
                        std::uint64_t session_seed, std::uint64_t n) {
  std::ostringstream ss;
  ss.precision(17);
  ss << c.users << ' ' << c.categories << ' ' << c.items_per_category << ' '
     << c.carousels << ' ' << c.carousel_length << ' ' << c.history_sessions
     << ' ' << c.preference_concentration << ' ' << c.click_scale << ' '
     << c.atc_scale << ' ' << c.curiosity_low << ' ' << c.curiosity_high
     << ' ' << world_seed << ' ' << session_seed << ' ' << n;
  return hash_hex(ss.str());
}

}  // namespace

void WorldConfig::validate() const {
  if (users < 2) throw ConfigError("world needs at least 2 users");
  if (categories < 2) throw ConfigError("world needs at least 2 categories");
  if (items_per_category < 1) throw ConfigError("items_per_category must be >= 1");
  if (carousels < 1) throw ConfigError("world needs at least 1 carousel");
  if (carousel_length < 1) throw ConfigError("carousel_length must be >= 1");
  if (carousel_length > 2 * items_per_category) {
    throw ConfigError("carousel_length exceeds the items of two categories");
  }
  if (history_sessions < 1) throw ConfigError("history_sessions must be >= 1");
  if (!(preference_concentration > 0.0)) {
    throw ConfigError("preference_concentration must be > 0");
  }
  if (!(click_scale > 0.0 && click_scale <= 1.0)) {
    throw ConfigError("click_scale must be in (0, 1]");
  }
  if (!(atc_scale > 0.0 && atc_scale <= 1.0)) {
    throw ConfigError("atc_scale must be in (0, 1]");
  }
  if (!(curiosity_low > 0.0 && curiosity_low <= curiosity_high)) {
    throw ConfigError("curiosity range must satisfy 0 < low <= high");
  }
}

double SyntheticWorld::affinity(std::size_t user, std::size_t item) const {
  return preference[user][items[item].category] * items[item].quality;
}

std::size_t SyntheticWorld::item_index_of(std::size_t carousel,
                                          std::size_t position) const {
  return carousel_items[carousel][position];
}

SyntheticWorld generate_world(const WorldConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SyntheticWorld w;
  w.cfg = cfg;
  w.seed = seed;
  w.now = kEpoch + 366 * kDay;

  auto rng = stream(seed, 1);
  std::uniform_real_distribution<double> quality(0.3, 1.0);

  for (int c = 0; c < cfg.categories; ++c) {
    w.categories.emplace_back("cat" + std::to_string(c));
  }
  for (int c = 0; c < cfg.categories; ++c) {
    for (int j = 0; j < cfg.items_per_category; ++j) {
      Item it{ItemId("i" + std::to_string(c) + "_" + std::to_string(j)), c,
              quality(rng)};
      w.catalog.insert(it.id, w.categories[c]);
      w.items.push_back(std::move(it));
    }
  }

  // Carousel k draws from a primary and a secondary category and lists its
  // items by descending quality.
  for (int k = 0; k < cfg.carousels; ++k) {
    const int primary = k % cfg.categories;
    const int secondary = (k + 3) % cfg.categories == primary
                              ? (k + 1) % cfg.categories
                              : (k + 3) % cfg.categories;
    const int n_primary = std::min(cfg.items_per_category,
                                   (cfg.carousel_length * 3 + 4) / 5);
    const int n_secondary = cfg.carousel_length - n_primary;
    std::vector<std::size_t> picked;
    for (auto [cat, n] : {std::pair{primary, n_primary}, std::pair{secondary, n_secondary}}) {
      std::vector<std::size_t> pool(cfg.items_per_category);
      std::iota(pool.begin(), pool.end(),
                static_cast<std::size_t>(cat) * cfg.items_per_category);
      std::shuffle(pool.begin(), pool.end(), rng);
      picked.insert(picked.end(), pool.begin(), pool.begin() + n);
    }
    std::stable_sort(picked.begin(), picked.end(), [&](std::size_t a, std::size_t b) {
      return w.items[a].quality > w.items[b].quality;
    });
    std::vector<ItemId> ids;
    for (auto i : picked) ids.push_back(w.items[i].id);
    w.carousels.emplace_back(CarouselId("k" + std::to_string(k)), std::move(ids));
    w.carousel_items.push_back(std::move(picked));
  }

  // Users mix a shared archetype with an individual taste, which gives the
  // category model collaborative structure to learn.
  std::vector<std::vector<double>> archetypes;
  for (int a = 0; a < kArchetypes; ++a) {
    archetypes.push_back(dirichlet(rng, cfg.categories, cfg.preference_concentration));
  }
  std::uniform_int_distribution<int> pick_archetype(0, kArchetypes - 1);
  std::uniform_real_distribution<double> curiosity(cfg.curiosity_low,
                                                   cfg.curiosity_high);
  for (int u = 0; u < cfg.users; ++u) {
    w.users.emplace_back("u" + std::to_string(u));
    const auto& base = archetypes[pick_archetype(rng)];
    const auto own = dirichlet(rng, cfg.categories, cfg.preference_concentration);
    std::vector<double> pref(cfg.categories);
    for (int c = 0; c < cfg.categories; ++c) pref[c] = 0.75 * base[c] + 0.25 * own[c];
    const double top = *std::max_element(pref.begin(), pref.end());
    for (auto& p : pref) p /= top;
    w.preference.push_back(std::move(pref));
    w.curiosity.push_back(curiosity(rng));
  }

  // A year of history under random page orderings.
  std::vector<UserState> states(w.users.size());
  for (auto& s : states) s.bought.assign(w.categories.size(), 0);
  std::uniform_int_distribution<std::int64_t> when(kEpoch, w.now - kDay);
  std::vector<std::size_t> order(w.carousels.size());
  for (std::size_t u = 0; u < w.users.size(); ++u) {
    std::vector<std::int64_t> starts(cfg.history_sessions);
    for (auto& t : starts) t = when(rng);
    std::sort(starts.begin(), starts.end());
    for (auto t : starts) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::int64_t ts = t;
      visit(w, u, states[u], order, rng, [&](const Interaction& x) {
        InteractionEvent e;
        e.user = w.users[u];
        e.carousel = w.carousels[x.carousel].id();
        if (x.item) e.item = w.items[*x.item].id;
        e.event = x.event;
        e.ts = ts;
        ts += 5;
        w.history.push_back(std::move(e));
      });
    }
  }
  std::stable_sort(w.history.begin(), w.history.end(),
                   [](const InteractionEvent& a, const InteractionEvent& b) {
                     return a.ts < b.ts;
                   });
  return w;
}

void write_world(const SyntheticWorld& world, const std::string& events_path,
                 const std::string& catalog_path) {
  std::ofstream out(events_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + events_path);
  for (const auto& e : world.history) out << serialize_event(e) << '\n';
  out.flush();
  if (!out) throw IoError("short write to " + events_path);
  write_catalog(world.catalog, catalog_path);
}

std::string_view to_string(Policy p) {
  return p == Policy::kStatic ? "static" : "dynamic";
}

Policy parse_policy(std::string_view s) {
  if (s == "static") return Policy::kStatic;
  if (s == "dynamic") return Policy::kDynamic;
  throw ParseError("policy", "unknown policy '" + std::string(s) + "'");
}

std::string to_json(const SimReport& r) {
  json j;
  j["policy"] = std::string(to_string(r.policy));
  j["world_seed"] = r.world_seed;
  j["session_seed"] = r.session_seed;
  j["config_hash"] = r.config_hash;
  j["w"] = r.w;
  j["sessions"] = r.sessions;
  j["atc_per_visit"] = r.atc_per_visit;
  j["item_page_visits_per_visit"] = r.item_page_visits_per_visit;
  j["distinct_new_categories_touched"] = r.distinct_new_categories_touched;
  j["p50_compute_micros"] = r.p50_compute_micros;
  j["p99_compute_micros"] = r.p99_compute_micros;
  j["latency_samples"] = r.latency_samples;
  return j.dump(2);
}

SimReport report_from_json(std::string_view text) {
  auto j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw ParseError("report", "malformed report JSON");
  }
  SimReport r;
  try {
    r.policy = parse_policy(j.at("policy").get<std::string>());
    r.world_seed = j.at("world_seed").get<std::uint64_t>();
    r.session_seed = j.at("session_seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.w = j.at("w").get<double>();
    r.sessions = j.at("sessions").get<std::uint64_t>();
    r.atc_per_visit = j.at("atc_per_visit").get<double>();
    r.item_page_visits_per_visit = j.at("item_page_visits_per_visit").get<double>();
    r.distinct_new_categories_touched =
        j.at("distinct_new_categories_touched").get<double>();
    r.p50_compute_micros = j.value("p50_compute_micros", 0.0);
    r.p99_compute_micros = j.value("p99_compute_micros", 0.0);
    r.latency_samples = j.value("latency_samples", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ParseError("report", e.what());
  }
  return r;
}

std::vector<std::size_t> static_ordering(const SyntheticWorld& world) {
  std::vector<double> pop(world.carousels.size(), 0.0);
  for (std::size_t k = 0; k < world.carousels.size(); ++k) {
    for (std::size_t l = 0; l < world.carousels[k].size(); ++l) {
      const std::size_t item = world.item_index_of(k, l);
      double sum = 0.0;
      for (std::size_t u = 0; u < world.users.size(); ++u) sum += world.affinity(u, item);
      pop[k] += sum * slot_bias(static_cast<int>(l + 1));
    }
  }
  std::vector<std::size_t> order(pop.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pop[a] > pop[b]; });
  return order;
}

TrainedModel train_world_model(const SyntheticWorld& world,
                               const TrainOptions& opts) {
  return train_model(world.history, world.catalog, opts);
}

namespace {

class DynamicRanker {
 public:
  DynamicRanker(const SyntheticWorld& w, const TrainedModel& model,
                const SimOptions& opts)
      : world_(w), opts_(opts), engine_(artifacts_from(model), opts.scoring) {
    for (std::size_t k = 0; k < w.carousels.size(); ++k) {
      index_[w.carousels[k].id().str()] = k;
    }
    request_.candidates = w.carousels;
    request_.zones = opts.zones;
  }

  std::vector<std::size_t> order(std::size_t user, double* micros) {
    request_.user = world_.users[user];
    const auto resp = engine_.rank(request_);
    if (micros) *micros = resp.compute_micros;
    std::vector<std::size_t> out;
    for (const auto& id : resp.ranking.zones) out.push_back(index_.at(id.str()));
    return out;
  }

  // Closes the visit: its sessionized carousel events update the priors.
  void feedback(std::span<const InteractionEvent> events) {
    if (events.empty()) return;
    for (const auto& s : sessionize(events, opts_.train.session)) {
      for (const auto& ce : s.events) {
        engine_.priors().apply(events.front().user, ce.carousel, ce.event);
      }
    }
  }

 private:
  const SyntheticWorld& world_;
  SimOptions opts_;
  Engine engine_;
  RankRequest request_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace

SimReport simulate(const SyntheticWorld& world, Policy policy,
                   std::uint64_t n_sessions, std::uint64_t seed,
                   const SimOptions& opts, const TrainedModel* model) {
  opts.scoring.validate();
  if (opts.zones < 1) throw ConfigError("zones must be >= 1");

  SimReport r;
  r.policy = policy;
  r.world_seed = world.seed;
  r.session_seed = seed;
  r.config_hash = config_hash(world.cfg, world.seed, seed, n_sessions);
  r.w = opts.scoring.w;
  r.sessions = n_sessions;
  if (n_sessions == 0) return r;

  std::optional<TrainedModel> own;
  std::optional<DynamicRanker> ranker;
  if (policy == Policy::kDynamic) {
    if (!model) {
      own.emplace(train_world_model(world, opts.train));
      model = &*own;
    }
    ranker.emplace(world, *model, opts);
  }

  auto static_order = static_ordering(world);
  if (static_cast<int>(static_order.size()) > opts.zones) static_order.resize(opts.zones);

  auto users_rng = stream(seed, 11);
  auto behavior_rng = stream(seed, 12);
  std::uniform_int_distribution<std::size_t> pick_user(0, world.users.size() - 1);
  auto states = initial_states(world);

  std::uint64_t atc = 0, clicks = 0, new_touched = 0;
  std::vector<double> latencies;
  std::vector<InteractionEvent> events;
  std::set<int> touched;
  for (std::uint64_t s = 0; s < n_sessions; ++s) {
    const std::size_t user = pick_user(users_rng);
    std::vector<std::size_t> order;
    if (ranker) {
      double micros = 0.0;
      order = ranker->order(user, &micros);
      latencies.push_back(micros);
    } else {
      order = static_order;
    }

    const auto before = states[user].bought;
    events.clear();
    touched.clear();
    std::int64_t ts = world.now + static_cast<std::int64_t>(s) * 3600;
    visit(world, user, states[user], order, behavior_rng, [&](const Interaction& x) {
      if (x.event == EventType::kClick) {
        ++clicks;
        const int cat = world.items[*x.item].category;
        if (!before[cat]) touched.insert(cat);
      } else if (x.event == EventType::kAtc) {
        ++atc;
      }
      if (ranker) {
        InteractionEvent e;
        e.user = world.users[user];
        e.carousel = world.carousels[x.carousel].id();
        if (x.item) e.item = world.items[*x.item].id;
        e.event = x.event;
        e.ts = ts;
        ts += 5;
        events.push_back(std::move(e));
      }
    });
    new_touched += touched.size();
    if (ranker) ranker->feedback(events);
  }

  const double n = static_cast<double>(n_sessions);
  r.atc_per_visit = static_cast<double>(atc) / n;
  r.item_page_visits_per_visit = static_cast<double>(clicks) / n;
  r.distinct_new_categories_touched = static_cast<double>(new_touched) / n;
  r.latency_samples = latencies.size();
  if (!latencies.empty()) {
    r.p50_compute_micros = percentile(latencies, 50.0);
    r.p99_compute_micros = percentile(latencies, 99.0);
  }
  return r;
}

std::vector<int> zone_trajectory(const SyntheticWorld& world, std::size_t user,
                                 std::size_t carousel, std::uint64_t n_sessions,
                                 std::uint64_t seed, const SimOptions& opts,
                                 const TrainedModel& model) {
  if (user >= world.users.size()) throw ConfigError("user index out of range");
  if (carousel >= world.carousels.size()) {
    throw ConfigError("carousel index out of range");
  }
  DynamicRanker ranker(world, model, opts);
  auto rng = stream(seed, 13);
  auto states = initial_states(world);
  std::vector<int> zones;
  std::vector<InteractionEvent> events;
  for (std::uint64_t s = 0; s < n_sessions; ++s) {
    const auto order = ranker.order(user, nullptr);
    const auto pos = std::find(order.begin(), order.end(), carousel);
    zones.push_back(pos == order.end() ? 0 : static_cast<int>(pos - order.begin()) + 1);
    events.clear();
    std::int64_t ts = world.now + static_cast<std::int64_t>(s) * 3600;
    visit(world, user, states[user], order, rng, [&](const Interaction& x) {
      InteractionEvent e;
      e.user = world.users[user];
      e.carousel = world.carousels[x.carousel].id();
      if (x.item) e.item = world.items[*x.item].id;
      e.event = x.event;
      e.ts = ts;
      ts += 5;
      events.push_back(std::move(e));
    });
    ranker.feedback(events);
  }
  return zones;
}

std::vector<Lift> compare(const SimReport& a, const SimReport& b) {
  if (a.config_hash != b.config_hash || a.sessions != b.sessions) {
    throw ConfigError("reports come from different worlds or session counts");
  }
  auto lift = [](std::string name, double base, double x) {
    Lift l{std::move(name), std::nullopt};
    if (base != 0.0) l.percent = 100.0 * (x - base) / base;
    return l;
  };
  return {
      lift("atc_per_visit", a.atc_per_visit, b.atc_per_visit),
      lift("item_page_visits_per_visit", a.item_page_visits_per_visit,
           b.item_page_visits_per_visit),
      lift("distinct_new_categories_touched", a.distinct_new_categories_touched,
           b.distinct_new_categories_touched),
  };
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw ConfigError("percentile of no samples");
  if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("percentile must be in [0, 100]");
  std::sort(samples.begin(), samples.end());
  const auto n = samples.size();
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return samples[rank - 1];
}

LatencyReport bench_latency(const Engine& engine, const BenchOptions& opts) {
  if (opts.requests < 1000) throw ConfigError("insufficient samples");
  if (opts.candidates < 1 || opts.items_per_carousel < 1) {
    throw ConfigError("candidates and items_per_carousel must be >= 1");
  }
  if (opts.concurrency < 1) throw ConfigError("concurrency must be >= 1");

  const auto& catalog_items = engine.artifacts().catalog->items();
  if (catalog_items.size() < static_cast<std::size_t>(opts.items_per_carousel)) {
    throw ConfigError("catalog has fewer items than items_per_carousel");
  }
  const auto& user_ids = engine.artifacts().user_item->row_ids();

  // A pool of prepared requests so that only scoring is on the clock.
  auto rng = stream(opts.seed, 21);
  constexpr std::size_t kPool = 64;
  std::vector<RankRequest> pool;
  std::vector<std::size_t> idx(catalog_items.size());
  for (std::size_t p = 0; p < kPool; ++p) {
    RankRequest req;
    req.user = user_ids.empty()
                   ? UserId("bench-user")
                   : UserId(user_ids[std::uniform_int_distribution<std::size_t>(
                         0, user_ids.size() - 1)(rng)]);
    for (int k = 0; k < opts.candidates; ++k) {
      std::iota(idx.begin(), idx.end(), 0);
      std::vector<ItemId> items;
      for (int l = 0; l < opts.items_per_carousel; ++l) {
        std::uniform_int_distribution<std::size_t> d(l, idx.size() - 1);
        std::swap(idx[l], idx[d(rng)]);
        items.push_back(catalog_items[idx[l]]);
      }
      req.candidates.emplace_back(CarouselId("bench" + std::to_string(k)),
                                  std::move(items));
    }
    pool.push_back(std::move(req));
  }

  for (std::uint64_t i = 0; i < opts.warmup; ++i) engine.rank(pool[i % kPool]);

  std::vector<double> samples(opts.requests);
  const auto workers = static_cast<std::uint64_t>(opts.concurrency);
  auto run = [&](std::uint64_t w) {
    for (std::uint64_t i = w; i < opts.requests; i += workers) {
      samples[i] = engine.rank(pool[i % kPool]).compute_micros;
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::uint64_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }

  LatencyReport out;
  out.requests = opts.requests;
  out.mean = std::accumulate(samples.begin(), samples.end(), 0.0) /
             static_cast<double>(samples.size());
  out.p50 = percentile(samples, 50.0);
  out.p95 = percentile(samples, 95.0);
  out.p99 = percentile(samples, 99.0);
  return out;
}

}  // namespace crank::sim
