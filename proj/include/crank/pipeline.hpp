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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "crank/domain.hpp"
#include "crank/factorization.hpp"
#include "crank/ingestion.hpp"
#include "crank/priors.hpp"
#include "crank/scoring.hpp"

namespace crank {

inline constexpr std::string_view kUserItemFile = "user_item.emb";
inline constexpr std::string_view kUserCategoryFile = "user_cat.emb";
inline constexpr std::string_view kEtaFile = "eta_uc.jsonl";
inline constexpr std::string_view kPriorsFile = "priors.jsonl";
inline constexpr std::string_view kCatalogFile = "catalog.jsonl";
inline constexpr std::string_view kManifestFile = "manifest.json";

inline constexpr std::array<std::string_view, 5> kArtifactFiles = {
    kUserItemFile, kUserCategoryFile, kEtaFile, kPriorsFile, kCatalogFile};

struct TrainOptions {
  TrainConfig als;
  // User-category model; defaults to `als`. Few categories usually call for
  // a smaller dim than the item model.
  std::optional<TrainConfig> category_als;
  int window_days = 365;
  SessionRule session;
  BetaPrior initial_prior{1.0, 1.0};
};

// Everything the offline job produces, before it is written to disk.
struct TrainedModel {
  EmbeddingTable user_item;
  EmbeddingTable user_category;
  EtaTable eta;
  std::vector<PriorEntry> priors;
  CategoryMap catalog;
};

TrainedModel train_model(std::span<const InteractionEvent> events,
                         const CategoryMap& catalog, const TrainOptions& opts);

// Historical priors: each user's events sorted by ts (file order breaks
// ties), sessionized, and folded from the initial prior.
std::vector<PriorEntry> seed_priors(std::span<const InteractionEvent> events,
                                    const SessionRule& rule,
                                    const BetaPrior& initial);

// Writes the five artifacts plus manifest.json into `dir` (created if
// missing).
void write_model(const TrainedModel& model, const std::string& dir);

// Reads events and catalog from disk, trains, and writes to `out_dir`.
void run_training(const std::string& events_path,
                  const std::string& catalog_path, const std::string& out_dir,
                  const TrainOptions& opts);

// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_checksum(const std::string& path);

// Checks every artifact listed in manifest.json against its recorded size
// and checksum. Returns artifact name -> checksum. Throws Error naming the
// first artifact that is missing or does not match.
std::map<std::string, std::string> verify_manifest(const std::string& dir);

}  // namespace crank
