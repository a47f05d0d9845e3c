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

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "crank/domain.hpp"
#include "crank/factorization.hpp"
#include "crank/ingestion.hpp"
#include "crank/pipeline.hpp"
#include "crank/priors.hpp"
#include "crank/scoring.hpp"

namespace httplib {
class Server;
}

namespace crank {

// Immutable model state shared by every request.
struct ModelArtifacts {
  std::shared_ptr<const EmbeddingTable> user_item;
  std::shared_ptr<const EmbeddingTable> user_category;
  std::shared_ptr<const EtaTable> eta;
  std::shared_ptr<const CategoryMap> catalog;
  std::vector<PriorEntry> priors;
  std::map<std::string, std::string> versions;  // artifact -> checksum
};

ModelArtifacts artifacts_from(TrainedModel model);
// Verifies manifest.json checksums, then loads all five artifacts.
ModelArtifacts load_artifacts(const std::string& dir);

struct RankRequest {
  UserId user;
  std::vector<Carousel> candidates;
  std::optional<int> zones;
};

// Throws ParseError for malformed bodies, empty or duplicate candidates, and
// zones < 1.
RankRequest parse_rank_request(std::string_view body);

struct RankResponse {
  ZoneRanking ranking;
  double compute_micros = 0.0;
};

std::string to_json(const RankResponse& r);

// Scoring over a fixed model plus a live PriorStore.
class Engine {
 public:
  Engine(ModelArtifacts artifacts, ScoringConfig cfg);

  RankResponse rank(const RankRequest& req) const;

  PriorStore& priors() { return priors_; }
  const PriorStore& priors() const { return priors_; }
  const PriorStore& base_priors() const { return base_; }
  const ModelArtifacts& artifacts() const { return artifacts_; }
  const ScoringConfig& config() const { return cfg_; }
  const ScoringModel& scoring_model() const { return model_; }

 private:
  ModelArtifacts artifacts_;
  ScoringConfig cfg_;
  PriorStore base_;
  PriorStore priors_;
  ScoringModel model_;
};

struct ServiceConfig {
  std::string model_dir;
  std::string host = "0.0.0.0";
  int port = 8080;
  ScoringConfig scoring;
  int update_interval_s = 10;
  // Overrides update_interval_s when set; used by tests.
  std::optional<std::chrono::milliseconds> update_interval;
  SessionRule session;
  int snapshot_interval_s = 60;
  std::string event_log;  // default: <model_dir>/events.jsonl
  FsyncPolicy fsync = FsyncPolicy::kEveryAppend;
};

struct Reply {
  int status = 200;
  std::string body;  // JSON
};

class RankingService {
 public:
  explicit RankingService(ServiceConfig cfg);
  ~RankingService();

  RankingService(const RankingService&) = delete;
  RankingService& operator=(const RankingService&) = delete;

  // Loads and validates artifacts, opens the event log and recovers priors.
  // The service answers 503 until this returns.
  void load();
  bool ready() const { return ready_.load(); }

  // Periodic feedback application and prior snapshots.
  void start_background();
  void stop_background();

  Reply handle_rank(std::string_view body) const;
  Reply handle_events(std::string_view body);
  Reply handle_health() const;
  Reply handle_prior(std::string_view user, std::string_view carousel) const;

  // Applies everything appended so far (what the periodic task does).
  ApplyResult apply_feedback_now();
  void write_snapshot();

  const ServiceConfig& config() const { return cfg_; }
  const Engine& engine() const { return *engine_; }

 private:
  std::string snapshot_path() const;
  std::string snapshot_meta_path() const;
  void recover();

  ServiceConfig cfg_;
  std::unique_ptr<Engine> engine_;
  std::unique_ptr<EventLog> log_;
  std::unique_ptr<FeedbackApplier> applier_;
  std::atomic<bool> ready_{false};

  std::thread snapshot_worker_;
  std::mutex snapshot_mu_;
  std::condition_variable snapshot_cv_;
  bool stopping_ = false;
};

// HTTP front end: POST /rank, POST /events, GET /health,
// GET /priors/{user}/{carousel}.
class HttpServer {
 public:
  explicit HttpServer(RankingService& service);
  ~HttpServer();

  // Binds to host:port (port 0 picks a free port) and returns the bound
  // port. Throws IoError on failure.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  RankingService& service_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace crank
