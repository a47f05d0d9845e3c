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

#include <csignal>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "crank/pipeline.hpp"
#include "crank/service.hpp"
#include "crank/simharness.hpp"

namespace {

double parse_log_base(const std::string& s) {
  if (s == "e") return std::numbers::e;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw crank::ConfigError("invalid log base '" + s + "'");
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw crank::IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw crank::IoError("cannot write " + path);
  out << text << '\n';
}

// Blocks SIGINT/SIGTERM in every thread and waits for them on a dedicated
// one, so shutdown runs outside signal context.
void stop_on_signal(crank::HttpServer& server) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread([set, &server] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  }).detach();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crank: carousel ranking engine"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train embeddings and priors from an event log");
  std::string events_path, catalog_path, out_dir;
  crank::TrainOptions topts;
  train->add_option("--events", events_path, "event JSONL")->required();
  train->add_option("--catalog", catalog_path, "catalog JSONL")->required();
  train->add_option("--out", out_dir, "model directory")->required();
  train->add_option("--dim", topts.als.dim)->capture_default_str();
  train->add_option("--iters", topts.als.iterations)->capture_default_str();
  train->add_option("--reg", topts.als.reg)->capture_default_str();
  train->add_option("--conf-alpha", topts.als.conf_alpha)->capture_default_str();
  train->add_option("--window-days", topts.window_days)->capture_default_str();
  train->add_option("--seed", topts.als.seed)->capture_default_str();
  train->add_option("--session-gap-s", topts.session.gap_seconds)->capture_default_str();
  int train_category_dim = 0;
  train->add_option("--category-dim", train_category_dim, "default: --dim");

  // serve
  auto* serve = app.add_subcommand("serve", "serve ranking requests over HTTP");
  serve->set_config("--config", "", "TOML/INI config file");
  crank::ServiceConfig scfg;
  std::string serve_log_base = "e";
  bool fold_on_close = false;
  serve->add_option("--model-dir", scfg.model_dir)->envname("CRANK_MODEL_DIR")->required();
  serve->add_option("--host", scfg.host)->capture_default_str();
  serve->add_option("--port", scfg.port)->envname("CRANK_PORT")->capture_default_str();
  serve->add_option("--w", scfg.scoring.w)->envname("CRANK_W")->capture_default_str();
  serve->add_option("--log-base", serve_log_base)->capture_default_str();
  serve->add_flag("--normalize-terms", scfg.scoring.normalize_terms);
  serve->add_option("--update-interval-s", scfg.update_interval_s)->capture_default_str();
  serve->add_option("--snapshot-interval-s", scfg.snapshot_interval_s)->capture_default_str();
  serve->add_option("--session-gap-s", scfg.session.gap_seconds)->capture_default_str();
  serve->add_flag("--fold-on-close", fold_on_close,
                  "fold session events only once the session closes");
  serve->add_option("--event-log", scfg.event_log, "default: <model-dir>/events.jsonl");

  // generate
  auto* generate = app.add_subcommand("generate", "write a synthetic world's event log and catalog");
  crank::sim::WorldConfig wcfg;
  std::uint64_t world_seed = 42;
  generate->add_option("--seed", world_seed)->capture_default_str();
  generate->add_option("--users", wcfg.users)->capture_default_str();
  generate->add_option("--history-sessions", wcfg.history_sessions)->capture_default_str();
  generate->add_option("--events", events_path)->required();
  generate->add_option("--catalog", catalog_path)->required();

  // simulate
  auto* simulate = app.add_subcommand("simulate", "replay sessions against a ranking policy");
  std::uint64_t sessions = 10000;
  std::uint64_t session_seed = 0;
  std::string policy = "dynamic", report_out, sim_log_base = "e";
  crank::sim::SimOptions sopts;
  simulate->add_option("--seed", world_seed, "world seed")->capture_default_str();
  simulate->add_option("--session-seed", session_seed, "default: the world seed");
  simulate->add_option("--users", wcfg.users)->capture_default_str();
  simulate->add_option("--sessions", sessions)->capture_default_str();
  simulate->add_option("--policy", policy)->check(CLI::IsMember({"static", "dynamic"}))
      ->capture_default_str();
  simulate->add_option("--w", sopts.scoring.w)->capture_default_str();
  simulate->add_option("--log-base", sim_log_base)->capture_default_str();
  simulate->add_option("--out", report_out, "report JSON path");
  bool raw_terms = false;
  int category_dim = 4;
  simulate->add_flag("--raw-terms", raw_terms, "combine alpha and gamma without normalization");
  simulate->add_option("--category-dim", category_dim)->capture_default_str();

  // compare
  auto* cmp = app.add_subcommand("compare", "lift of report b over report a");
  std::string report_a, report_b;
  cmp->add_option("--a", report_a)->required();
  cmp->add_option("--b", report_b)->required();

  // bench
  auto* bench = app.add_subcommand("bench", "scoring latency percentiles");
  crank::sim::BenchOptions bopts;
  std::string bench_model_dir;
  bopts.concurrency = 8;
  bench->add_option("--model-dir", bench_model_dir, "default: train a synthetic world");
  bench->add_option("--seed", world_seed, "world seed when no model dir is given")
      ->capture_default_str();
  bench->add_option("--requests", bopts.requests)->capture_default_str();
  bench->add_option("--concurrency", bopts.concurrency)->capture_default_str();
  bench->add_option("--candidates", bopts.candidates)->capture_default_str();
  bench->add_option("--items", bopts.items_per_carousel)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      if (train_category_dim > 0) {
        topts.category_als = topts.als;
        topts.category_als->dim = train_category_dim;
      }
      crank::run_training(events_path, catalog_path, out_dir, topts);
      std::cout << "wrote model to " << out_dir << '\n';
    } else if (*serve) {
      scfg.scoring.log_base = parse_log_base(serve_log_base);
      if (fold_on_close) scfg.session.fold = crank::FoldMode::kOnClose;
      crank::RankingService service(scfg);
      crank::HttpServer server(service);
      stop_on_signal(server);
      const int port = server.bind(scfg.host, scfg.port);
      std::cerr << "listening on " << scfg.host << ':' << port << '\n';
      // /health answers 503 until artifacts are loaded and verified.
      std::thread http([&] { server.listen(); });
      service.load();
      service.start_background();
      std::cerr << "ready\n";
      http.join();
      service.stop_background();
      service.write_snapshot();
    } else if (*generate) {
      const auto world = crank::sim::generate_world(wcfg, world_seed);
      crank::sim::write_world(world, events_path, catalog_path);
      std::cout << "wrote " << world.history.size() << " events\n";
    } else if (*simulate) {
      sopts.scoring.log_base = parse_log_base(sim_log_base);
      sopts.scoring.normalize_terms = !raw_terms;
      sopts.train.category_als->dim = category_dim;
      if (simulate->count("--session-seed") == 0) session_seed = world_seed;
      const auto world = crank::sim::generate_world(wcfg, world_seed);
      const auto report = crank::sim::simulate(
          world, crank::sim::parse_policy(policy), sessions, session_seed, sopts);
      const auto text = crank::sim::to_json(report);
      if (report_out.empty()) {
        std::cout << text << '\n';
      } else {
        write_file(report_out, text);
      }
    } else if (*cmp) {
      const auto a = crank::sim::report_from_json(read_file(report_a));
      const auto b = crank::sim::report_from_json(read_file(report_b));
      for (const auto& lift : crank::sim::compare(a, b)) {
        std::printf("%-34s", lift.metric.c_str());
        if (lift.percent) {
          std::printf("%+.2f%%\n", *lift.percent);
        } else {
          std::printf("n/a\n");
        }
      }
    } else if (*bench) {
      crank::ModelArtifacts artifacts;
      if (bench_model_dir.empty()) {
        const auto world = crank::sim::generate_world(wcfg, world_seed);
        artifacts = crank::artifacts_from(crank::sim::train_world_model(world, {}));
      } else {
        artifacts = crank::load_artifacts(bench_model_dir);
      }
      crank::Engine engine(std::move(artifacts), crank::ScoringConfig{});
      const auto r = crank::sim::bench_latency(engine, bopts);
      std::printf("requests %llu  concurrency %d  %d carousels x %d items\n",
                  static_cast<unsigned long long>(r.requests), bopts.concurrency,
                  bopts.candidates, bopts.items_per_carousel);
      std::printf("p50 %.1f us  p95 %.1f us  p99 %.1f us  mean %.1f us\n", r.p50,
                  r.p95, r.p99, r.mean);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
