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

#include "crank/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace crank {

namespace fs = std::filesystem;

std::vector<PriorEntry> seed_priors(std::span<const InteractionEvent> events,
                                    const SessionRule& rule,
                                    const BetaPrior& initial) {
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (events[a].user != events[b].user) return events[a].user < events[b].user;
    return events[a].ts < events[b].ts;
  });

  std::map<std::pair<std::string, std::string>, BetaPrior> priors;
  std::vector<InteractionEvent> user_events;
  auto flush_user = [&] {
    if (user_events.empty()) return;
    for (const auto& session : sessionize(user_events, rule)) {
      for (const auto& ce : session.events) {
        auto key = std::make_pair(user_events.front().user.str(), ce.carousel.str());
        auto [it, fresh] = priors.try_emplace(key, initial);
        it->second = update_prior(it->second, ce.event);
      }
    }
    user_events.clear();
  };
  for (std::size_t idx : order) {
    if (!user_events.empty() && user_events.front().user != events[idx].user) {
      flush_user();
    }
    user_events.push_back(events[idx]);
  }
  flush_user();

  std::vector<PriorEntry> out;
  out.reserve(priors.size());
  for (const auto& [key, prior] : priors) {
    out.push_back({{UserId(key.first), CarouselId(key.second)}, prior});
  }
  return out;
}

TrainedModel train_model(std::span<const InteractionEvent> events,
                         const CategoryMap& catalog, const TrainOptions& opts) {
  const TrainConfig& category_cfg = opts.category_als.value_or(opts.als);
  opts.als.validate();
  category_cfg.validate();
  opts.session.validate();
  for (const auto& e : events) {
    if (e.item) catalog.category_of(*e.item);
  }

  const auto item_matrix = build_matrix(events, MatrixAxis::kItem, catalog,
                                        opts.window_days);
  const auto category_matrix = build_matrix(events, MatrixAxis::kCategory,
                                            catalog, opts.window_days);

  TrainedModel model;
  model.user_item = train_als(item_matrix, opts.als);
  model.user_category = train_als(category_matrix, category_cfg);
  for (std::size_t r = 0; r < category_matrix.rows(); ++r) {
    for (const auto& e : category_matrix.row(r)) {
      model.eta.add(UserId(category_matrix.row_ids()[r]),
                    CategoryId(category_matrix.col_ids()[e.index]),
                    static_cast<long>(e.count));
    }
  }
  model.priors = seed_priors(events, opts.session, opts.initial_prior);
  model.catalog = catalog;
  return model;
}

std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void write_model(const TrainedModel& model, const std::string& dir) {
  fs::create_directories(dir);
  auto path = [&](std::string_view name) { return (fs::path(dir) / name).string(); };

  write_embeddings(model.user_item, path(kUserItemFile));
  write_embeddings(model.user_category, path(kUserCategoryFile));
  write_eta(model.eta, path(kEtaFile));
  {
    PriorStore store;
    for (const auto& e : model.priors) store.set(e.key.user, e.key.carousel, e.prior);
    write_prior_snapshot(store, path(kPriorsFile));
  }
  write_catalog(model.catalog, path(kCatalogFile));

  nlohmann::ordered_json manifest;
  manifest["format"] = 1;
  for (auto name : kArtifactFiles) {
    const std::string p = path(name);
    manifest["artifacts"][std::string(name)] = {
        {"bytes", fs::file_size(p)}, {"fnv1a64", file_checksum(p)}};
  }
  std::ofstream out(path(kManifestFile), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

void run_training(const std::string& events_path,
                  const std::string& catalog_path, const std::string& out_dir,
                  const TrainOptions& opts) {
  const auto catalog = load_catalog(catalog_path);
  const auto events = load_events(events_path);
  write_model(train_model(events, catalog, opts), out_dir);
}

std::map<std::string, std::string> verify_manifest(const std::string& dir) {
  const auto manifest_path = fs::path(dir) / kManifestFile;
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw Error("missing " + manifest_path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto manifest = nlohmann::json::parse(ss.str(), nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("artifacts")) {
    throw Error("corrupt " + manifest_path.string());
  }

  std::map<std::string, std::string> out;
  for (auto name : kArtifactFiles) {
    const std::string key(name);
    if (!manifest["artifacts"].contains(key)) {
      throw Error("manifest does not list " + key);
    }
    const auto& entry = manifest["artifacts"][key];
    const auto p = (fs::path(dir) / name).string();
    if (!fs::exists(p)) throw Error("artifact " + key + " is missing");
    if (fs::file_size(p) != entry.value("bytes", std::uint64_t{0})) {
      throw Error("artifact " + key + " has the wrong size");
    }
    const std::string sum = file_checksum(p);
    if (sum != entry.value("fnv1a64", std::string())) {
      throw Error("artifact " + key + " failed checksum validation");
    }
    out[key] = sum;
  }
  return out;
}

}  // namespace crank
