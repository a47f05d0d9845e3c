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
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "crank/domain.hpp"
#include "crank/priors.hpp"

namespace crank {

enum class FoldMode {
  // Fold a (carousel, type) pair the first time it occurs in a session.
  kFirstOccurrence,
  // Fold a session's pairs only once the session has closed.
  kOnClose,
};

struct SessionRule {
  std::int64_t gap_seconds = 1800;
  // Count each event type once per carousel per session; false feeds every
  // raw event through.
  bool dedup = true;
  FoldMode fold = FoldMode::kFirstOccurrence;

  void validate() const;
};

struct CarouselEvent {
  CarouselId carousel;
  EventType event;

  friend bool operator==(const CarouselEvent&, const CarouselEvent&) = default;
};

struct Session {
  std::int64_t start_ts = 0;
  std::int64_t end_ts = 0;
  std::vector<CarouselEvent> events;  // first-occurrence order
};

// Splits one user's time-ordered events into sessions at gaps greater than
// rule.gap_seconds and derives carousel-level events per session. Throws
// ConfigError if the input is not sorted by ts or mixes users.
std::vector<Session> sessionize(std::span<const InteractionEvent> events,
                                const SessionRule& rule);

// Incremental form of sessionize over an interleaved multi-user stream.
// Emits the carousel-level events that are ready to fold.
class SessionTracker {
 public:
  explicit SessionTracker(SessionRule rule);

  using Ready = std::vector<std::pair<UserId, CarouselEvent>>;

  // Feeds one record in log order. The watermark (largest ts seen) first
  // closes every session that ended more than gap_seconds before it, then
  // the event joins or opens its user's session. An event older than its
  // session's end is counted as late and still joins that session. Because
  // closing is driven by the records alone, the output does not depend on
  // how the stream is batched.
  void observe(const InteractionEvent& e, Ready& ready);

  // Closes all open sessions.
  void flush(Ready& ready);

  std::int64_t watermark() const { return watermark_; }
  std::uint64_t late_events() const { return late_events_; }
  std::size_t open_sessions() const { return open_.size(); }

 private:
  struct OpenSession {
    std::int64_t end_ts = 0;
    std::vector<CarouselEvent> seen;
    std::multimap<std::int64_t, UserId>::iterator expiry;
  };

  void close_expired(Ready& ready);
  void emit_closed(const UserId& user, OpenSession& s, Ready& ready);

  SessionRule rule_;
  std::unordered_map<UserId, OpenSession> open_;
  std::multimap<std::int64_t, UserId> by_end_;
  std::int64_t watermark_ = 0;
  std::uint64_t late_events_ = 0;
};

enum class FsyncPolicy { kNever, kEveryAppend };

struct LogRecord {
  std::uint64_t offset;
  std::string line;
};

// Append-only JSONL event log. Offsets are record indices starting at 0.
// A torn trailing record (no terminating newline) is truncated on open.
class EventLog {
 public:
  explicit EventLog(std::string path, FsyncPolicy fsync = FsyncPolicy::kNever);
  ~EventLog();

  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  // Durable append (per the fsync policy). Throws IoError on failure; the
  // event is then not part of the log.
  std::uint64_t append(const InteractionEvent& e);
  // Appends many events under one lock; returns the first offset.
  std::uint64_t append_batch(std::span<const InteractionEvent> events);

  std::uint64_t size() const;
  const std::string& path() const { return path_; }

  // Records in [begin, min(end, size())).
  std::vector<LogRecord> read(std::uint64_t begin, std::uint64_t end) const;

 private:
  void write_all(const std::string& data);

  std::string path_;
  FsyncPolicy fsync_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::vector<std::uint64_t> starts_;  // byte offset of each record
  std::uint64_t bytes_ = 0;
};

// Sidecar `{"offset": n}` file recording how far the log has been applied.
class Checkpoint {
 public:
  // Missing file reads as offset 0.
  explicit Checkpoint(std::string path);

  std::uint64_t offset() const { return offset_; }
  // Throws Error on regression (n < offset()).
  void commit(std::uint64_t n);
  // Unconditionally rewrites the checkpoint (used on recovery).
  void reset(std::uint64_t n);

 private:
  void persist() const;

  std::string path_;
  std::uint64_t offset_ = 0;
};

struct ApplyResult {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::size_t records = 0;
  std::size_t folded = 0;
  std::size_t skipped = 0;
  bool rejected = false;  // range already applied
};

// Folds log records into a PriorStore through a SessionTracker and advances
// the checkpoint. One applier owns a checkpoint.
class FeedbackApplier {
 public:
  FeedbackApplier(const EventLog& log, PriorStore& store, SessionRule rule,
                  std::optional<std::string> checkpoint_path = {});
  ~FeedbackApplier();

  FeedbackApplier(const FeedbackApplier&) = delete;
  FeedbackApplier& operator=(const FeedbackApplier&) = delete;

  // Applies [begin, end). A range that ends at or before the checkpoint is
  // rejected without touching the store; a range starting past the
  // checkpoint throws.
  ApplyResult apply_range(std::uint64_t begin, std::uint64_t end);
  // Applies everything appended since the checkpoint.
  ApplyResult apply_pending();
  // kOnClose only: closes every open session and folds it.
  std::size_t flush();

  std::uint64_t checkpoint() const;
  // Overrides the starting offset (recovery from a snapshot).
  void reset_checkpoint(std::uint64_t offset);
  std::uint64_t warnings() const { return warnings_.load(); }
  std::uint64_t late_events() const;

  // Runs apply_pending every `interval` on a background thread.
  void start(std::chrono::milliseconds interval);
  void stop();

 private:
  std::size_t fold(const SessionTracker::Ready& ready);

  const EventLog& log_;
  PriorStore& store_;
  SessionRule rule_;
  mutable std::mutex mu_;
  SessionTracker tracker_;
  std::optional<Checkpoint> checkpoint_file_;
  std::uint64_t checkpoint_ = 0;
  std::atomic<std::uint64_t> warnings_{0};

  std::thread worker_;
  std::mutex worker_mu_;
  std::condition_variable worker_cv_;
  bool stopping_ = false;
};

// Rebuilds priors from offset 0 of the log on top of `base`.
void rebuild_priors(const EventLog& log, const PriorStore& base,
                    const SessionRule& rule, PriorStore& out);

}  // namespace crank
