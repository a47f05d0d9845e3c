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

#include "crank/service.hpp"

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "httplib.h"
#include "json.hpp"

namespace crank {

namespace fs = std::filesystem;
using nlohmann::json;

ModelArtifacts artifacts_from(TrainedModel model) {
  ModelArtifacts a;
  a.user_item = std::make_shared<const EmbeddingTable>(std::move(model.user_item));
  a.user_category =
      std::make_shared<const EmbeddingTable>(std::move(model.user_category));
  a.eta = std::make_shared<const EtaTable>(std::move(model.eta));
  a.catalog = std::make_shared<const CategoryMap>(std::move(model.catalog));
  a.priors = std::move(model.priors);
  for (auto name : kArtifactFiles) a.versions[std::string(name)] = "in-memory";
  return a;
}

ModelArtifacts load_artifacts(const std::string& dir) {
  ModelArtifacts a;
  a.versions = verify_manifest(dir);
  auto path = [&](std::string_view name) { return (fs::path(dir) / name).string(); };
  a.user_item = std::make_shared<const EmbeddingTable>(read_embeddings(path(kUserItemFile)));
  a.user_category =
      std::make_shared<const EmbeddingTable>(read_embeddings(path(kUserCategoryFile)));
  a.eta = std::make_shared<const EtaTable>(load_eta(path(kEtaFile)));
  a.catalog = std::make_shared<const CategoryMap>(load_catalog(path(kCatalogFile)));
  PriorStore store;
  load_prior_snapshot(store, path(kPriorsFile));
  a.priors = store.entries();
  return a;
}

RankRequest parse_rank_request(std::string_view body) {
  json obj = json::parse(body, nullptr, false);
  if (obj.is_discarded() || !obj.is_object()) {
    throw ParseError("", "request body must be a JSON object");
  }
  if (!obj.contains("user") || !obj["user"].is_string()) {
    throw ParseError("user", "missing 'user'");
  }
  RankRequest req;
  req.user = UserId(obj["user"].get<std::string>());

  if (!obj.contains("candidates") || !obj["candidates"].is_array() ||
      obj["candidates"].empty()) {
    throw ParseError("candidates", "'candidates' must be a non-empty array");
  }
  std::unordered_set<std::string> ids;
  for (const auto& c : obj["candidates"]) {
    if (!c.is_object() || !c.contains("id") || !c["id"].is_string() ||
        !c.contains("items") || !c["items"].is_array()) {
      throw ParseError("candidates", "each candidate needs 'id' and 'items'");
    }
    std::vector<ItemId> items;
    for (const auto& i : c["items"]) {
      if (!i.is_string()) throw ParseError("items", "item ids must be strings");
      items.emplace_back(i.get<std::string>());
    }
    const std::string id = c["id"].get<std::string>();
    if (!ids.insert(id).second) {
      throw ParseError("candidates", "duplicate carousel id " + id);
    }
    try {
      req.candidates.emplace_back(CarouselId(id), std::move(items));
    } catch (const ConfigError& err) {
      throw ParseError("items", err.what());
    }
  }
  if (obj.contains("zones") && !obj["zones"].is_null()) {
    if (!obj["zones"].is_number_integer() || obj["zones"].get<long>() < 1) {
      throw ParseError("zones", "'zones' must be an integer >= 1");
    }
    req.zones = static_cast<int>(
        std::min<long>(obj["zones"].get<long>(), std::numeric_limits<int>::max()));
  }
  return req;
}

std::string to_json(const RankResponse& r) {
  nlohmann::ordered_json out;
  out["ranking"] = json::array();
  out["scores"] = json::object();
  for (const auto& s : r.ranking.scores) {
    out["ranking"].push_back(s.carousel.str());
    out["scores"][s.carousel.str()] = {{"alpha", s.alpha},
                                       {"gamma", s.gamma},
                                       {"phi", s.phi},
                                       {"lambda", s.lambda}};
  }
  out["compute_micros"] = r.compute_micros;
  return out.dump();
}

Engine::Engine(ModelArtifacts artifacts, ScoringConfig cfg)
    : artifacts_(std::move(artifacts)), cfg_(cfg) {
  cfg_.validate();
  if (!artifacts_.user_item || !artifacts_.user_category || !artifacts_.eta ||
      !artifacts_.catalog) {
    throw ConfigError("model artifacts are incomplete");
  }
  for (const auto& e : artifacts_.priors) {
    base_.set(e.key.user, e.key.carousel, e.prior);
    priors_.set(e.key.user, e.key.carousel, e.prior);
  }
  model_.user_item = artifacts_.user_item;
  model_.discovery = std::make_shared<const DiscoveryInputs>(
      artifacts_.user_category, artifacts_.eta);
  model_.catalog = artifacts_.catalog;
  model_.priors = &priors_;
}

RankResponse Engine::rank(const RankRequest& req) const {
  const auto start = std::chrono::steady_clock::now();
  auto scores = score_carousels(req.user, req.candidates, model_, cfg_);
  const int zones = req.zones.value_or(static_cast<int>(req.candidates.size()));
  RankResponse out;
  out.ranking = rank_carousels(scores, zones, cfg_);
  const auto stop = std::chrono::steady_clock::now();
  out.compute_micros =
      std::chrono::duration<double, std::micro>(stop - start).count();
  return out;
}

namespace {

Reply error_reply(int status, const std::string& message,
                  const json& extra = json::object()) {
  json body = extra;
  body["error"] = message;
  return {status, body.dump()};
}

const Reply kNotReady{503, R"({"error":"service not ready"})"};

}  // namespace

RankingService::RankingService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.scoring.validate();
  cfg_.session.validate();
  if (cfg_.update_interval_s < 1 && !cfg_.update_interval) {
    throw ConfigError("update interval must be >= 1 s");
  }
  if (cfg_.event_log.empty()) {
    cfg_.event_log = (fs::path(cfg_.model_dir) / "events.jsonl").string();
  }
}

RankingService::~RankingService() { stop_background(); }

std::string RankingService::snapshot_path() const {
  return cfg_.event_log + ".priors.jsonl";
}

std::string RankingService::snapshot_meta_path() const {
  return cfg_.event_log + ".priors.meta.json";
}

void RankingService::load() {
  engine_ = std::make_unique<Engine>(load_artifacts(cfg_.model_dir), cfg_.scoring);
  log_ = std::make_unique<EventLog>(cfg_.event_log, cfg_.fsync);
  applier_ = std::make_unique<FeedbackApplier>(
      *log_, engine_->priors(), cfg_.session, cfg_.event_log + ".checkpoint");
  recover();
  ready_.store(true);
}

void RankingService::recover() {
  // Resume from a snapshot taken over the same base priors; otherwise replay
  // the whole log over the trained priors.
  const std::string base_version =
      engine_->artifacts().versions.at(std::string(kPriorsFile));
  std::uint64_t from = 0;
  std::ifstream meta_in(snapshot_meta_path(), std::ios::binary);
  if (meta_in) {
    std::ostringstream ss;
    ss << meta_in.rdbuf();
    auto meta = json::parse(ss.str(), nullptr, false);
    if (!meta.is_discarded() && meta.value("base", std::string()) == base_version &&
        meta.value("offset", std::uint64_t{0}) <= log_->size() &&
        fs::exists(snapshot_path())) {
      PriorStore snap;
      load_prior_snapshot(snap, snapshot_path());
      engine_->priors().copy_from(snap);
      from = meta.value("offset", std::uint64_t{0});
    }
  }
  applier_->reset_checkpoint(from);
  applier_->apply_pending();
}

void RankingService::write_snapshot() {
  if (!ready()) return;
  const std::uint64_t offset = applier_->checkpoint();
  write_prior_snapshot(engine_->priors(), snapshot_path());
  json meta = {{"offset", offset},
               {"ts", engine_->priors().snapshot_ts()},
               {"base", engine_->artifacts().versions.at(std::string(kPriorsFile))}};
  const std::string tmp = snapshot_meta_path() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << meta.dump() << '\n';
  }
  std::rename(tmp.c_str(), snapshot_meta_path().c_str());
}

void RankingService::start_background() {
  if (!ready()) throw Error("start_background before load");
  applier_->start(cfg_.update_interval.value_or(
      std::chrono::seconds(cfg_.update_interval_s)));
  {
    std::lock_guard lock(snapshot_mu_);
    stopping_ = false;
  }
  snapshot_worker_ = std::thread([this] {
    std::unique_lock lock(snapshot_mu_);
    const auto interval = std::chrono::seconds(cfg_.snapshot_interval_s);
    while (!snapshot_cv_.wait_for(lock, interval, [this] { return stopping_; })) {
      lock.unlock();
      try {
        write_snapshot();
      } catch (const std::exception&) {
        // Retried on the next tick; the event log remains authoritative.
      }
      lock.lock();
    }
  });
}

void RankingService::stop_background() {
  if (applier_) applier_->stop();
  {
    std::lock_guard lock(snapshot_mu_);
    stopping_ = true;
  }
  snapshot_cv_.notify_all();
  if (snapshot_worker_.joinable()) snapshot_worker_.join();
}

ApplyResult RankingService::apply_feedback_now() {
  if (!ready()) throw Error("service not ready");
  return applier_->apply_pending();
}

Reply RankingService::handle_rank(std::string_view body) const {
  if (!ready()) return kNotReady;
  RankRequest req;
  try {
    req = parse_rank_request(body);
  } catch (const ParseError& err) {
    return error_reply(400, err.what(), {{"field", err.field()}});
  }
  try {
    return {200, to_json(engine_->rank(req))};
  } catch (const LookupError& err) {
    return error_reply(422, err.what(), {{"item", err.key()}});
  }
}

Reply RankingService::handle_events(std::string_view body) {
  if (!ready()) return kNotReady;
  json batch = json::parse(body, nullptr, false);
  if (batch.is_discarded() || !batch.is_array()) {
    return error_reply(400, "body must be a JSON array of events");
  }
  std::vector<InteractionEvent> valid;
  json rejected = json::array();
  json diagnostics = json::array();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    try {
      valid.push_back(parse_event(batch[i].dump()));
    } catch (const ParseError& err) {
      rejected.push_back(i);
      diagnostics.push_back({{"index", i}, {"field", err.field()}, {"error", err.what()}});
    }
  }
  if (!batch.empty() && valid.empty()) {
    return error_reply(400, "no valid events in batch",
                       {{"accepted", 0}, {"rejected", rejected}, {"errors", diagnostics}});
  }
  try {
    log_->append_batch(valid);
  } catch (const IoError& err) {
    return error_reply(500, err.what());
  }
  json out = {{"accepted", valid.size()}};
  if (!rejected.empty()) {
    out["rejected"] = rejected;
    out["errors"] = diagnostics;
  }
  return {200, out.dump()};
}

Reply RankingService::handle_health() const {
  if (!ready()) {
    return {503, json{{"status", "loading"}, {"artifacts", json::object()}}.dump()};
  }
  json artifacts = json::object();
  for (const auto& [name, version] : engine_->artifacts().versions) {
    artifacts[name] = version;
  }
  return {200, json{{"status", "ok"}, {"artifacts", artifacts}}.dump()};
}

Reply RankingService::handle_prior(std::string_view user,
                                   std::string_view carousel) const {
  if (!ready()) return kNotReady;
  if (!is_valid_identifier(user) || !is_valid_identifier(carousel)) {
    return error_reply(400, "invalid identifier");
  }
  const BetaPrior p =
      engine_->priors().get_or_init(UserId(user), CarouselId(carousel));
  return {200, json{{"a", p.a}, {"b", p.b}, {"lambda", expected_lambda(p)}}.dump()};
}

HttpServer::HttpServer(RankingService& service)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto send = [](httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, "application/json");
  };
  server_->Post("/rank", [this, send](const httplib::Request& req,
                                      httplib::Response& res) {
    send(res, service_.handle_rank(req.body));
  });
  server_->Post("/events", [this, send](const httplib::Request& req,
                                        httplib::Response& res) {
    send(res, service_.handle_events(req.body));
  });
  server_->Get("/health", [this, send](const httplib::Request&,
                                       httplib::Response& res) {
    send(res, service_.handle_health());
  });
  server_->Get(R"(/priors/([^/]+)/([^/]+))",
               [this, send](const httplib::Request& req, httplib::Response& res) {
                 send(res, service_.handle_prior(req.matches[1].str(),
                                                 req.matches[2].str()));
               });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = port == 0 ? server_->bind_to_any_port(host)
                        : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  }
  return bound;
}

void HttpServer::listen() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_) server_->stop();
}

}  // namespace crank
