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

#include "crank/ingestion.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace crank {

void SessionRule::validate() const {
  if (gap_seconds <= 0) throw ConfigError("session gap must be > 0 seconds");
}

namespace {

// Appends `ce` to `seen` unless deduplication finds it already there.
// Returns true if it was appended.
bool record(std::vector<CarouselEvent>& seen, const CarouselEvent& ce,
            bool dedup) {
  if (dedup && std::find(seen.begin(), seen.end(), ce) != seen.end()) {
    return false;
  }
  seen.push_back(ce);
  return true;
}

}  // namespace

std::vector<Session> sessionize(std::span<const InteractionEvent> events,
                                const SessionRule& rule) {
  rule.validate();
  std::vector<Session> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (i > 0) {
      if (e.user != events[0].user) {
        throw ConfigError("sessionize expects events for a single user");
      }
      if (e.ts < events[i - 1].ts) {
        throw ConfigError("events are not sorted by timestamp");
      }
    }
    if (out.empty() || e.ts - out.back().end_ts > rule.gap_seconds) {
      out.push_back(Session{e.ts, e.ts, {}});
    }
    Session& s = out.back();
    s.end_ts = e.ts;
    record(s.events, CarouselEvent{e.carousel, e.event}, rule.dedup);
  }
  return out;
}

SessionTracker::SessionTracker(SessionRule rule) : rule_(rule) {
  rule_.validate();
}

void SessionTracker::emit_closed(const UserId& user, OpenSession& s,
                                 Ready& ready) {
  if (rule_.fold != FoldMode::kOnClose) return;
  for (auto& ce : s.seen) ready.emplace_back(user, ce);
}

void SessionTracker::close_expired(Ready& ready) {
  while (!by_end_.empty() &&
         watermark_ - by_end_.begin()->first > rule_.gap_seconds) {
    auto it = by_end_.begin();
    UserId user = it->second;
    auto sit = open_.find(user);
    emit_closed(user, sit->second, ready);
    open_.erase(sit);
    by_end_.erase(it);
  }
}

void SessionTracker::observe(const InteractionEvent& e, Ready& ready) {
  watermark_ = std::max(watermark_, e.ts);
  close_expired(ready);

  auto [it, fresh] = open_.try_emplace(e.user);
  OpenSession& s = it->second;
  if (fresh) {
    s.end_ts = e.ts;
    s.expiry = by_end_.emplace(e.ts, e.user);
  } else if (e.ts < s.end_ts) {
    ++late_events_;
  } else if (e.ts > s.end_ts) {
    by_end_.erase(s.expiry);
    s.end_ts = e.ts;
    s.expiry = by_end_.emplace(e.ts, e.user);
  }

  const CarouselEvent ce{e.carousel, e.event};
  if (record(s.seen, ce, rule_.dedup) &&
      rule_.fold == FoldMode::kFirstOccurrence) {
    ready.emplace_back(e.user, ce);
  }
}

void SessionTracker::flush(Ready& ready) {
  // Close in end-time order so the emitted sequence is deterministic.
  for (auto& [end, user] : by_end_) emit_closed(user, open_.at(user), ready);
  by_end_.clear();
  open_.clear();
}

namespace {

// Drops a partially written record so the log stays line-aligned. If this
// fails too, the torn tail is trimmed on the next open.
void trim_tail(int fd, std::uint64_t size) {
  [[maybe_unused]] int rc = ::ftruncate(fd, static_cast<off_t>(size));
}

}  // namespace

EventLog::EventLog(std::string path, FsyncPolicy fsync)
    : path_(std::move(path)), fsync_(fsync) {
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw IoError("cannot open event log " + path_ + ": " + std::strerror(errno));
  }
  std::ifstream in(path_, std::ios::binary);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  std::uint64_t pos = 0;
  while (pos < buf.size()) {
    std::size_t nl = buf.find('\n', pos);
    if (nl == std::string::npos) break;  // torn tail
    starts_.push_back(pos);
    pos = nl + 1;
  }
  bytes_ = pos;
  if (bytes_ < buf.size() && ::ftruncate(fd_, static_cast<off_t>(bytes_)) != 0) {
    ::close(fd_);
    throw IoError("cannot truncate torn record in " + path_);
  }
}

EventLog::~EventLog() {
  if (fd_ >= 0) ::close(fd_);
}

void EventLog::write_all(const std::string& data) {
  std::size_t done = 0;
  while (done < data.size()) {
    ssize_t n = ::write(fd_, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string reason = std::strerror(errno);
      trim_tail(fd_, bytes_);
      throw IoError("append to " + path_ + " failed: " + reason);
    }
    done += static_cast<std::size_t>(n);
  }
  if (fsync_ == FsyncPolicy::kEveryAppend && ::fsync(fd_) != 0) {
    const std::string reason = std::strerror(errno);
    trim_tail(fd_, bytes_);
    throw IoError("fsync of " + path_ + " failed: " + reason);
  }
}

std::uint64_t EventLog::append(const InteractionEvent& e) {
  return append_batch(std::span<const InteractionEvent>(&e, 1));
}

std::uint64_t EventLog::append_batch(std::span<const InteractionEvent> events) {
  std::string data;
  std::vector<std::uint64_t> lengths;
  lengths.reserve(events.size());
  for (const auto& e : events) {
    std::string line = serialize_event(e);
    line += '\n';
    lengths.push_back(line.size());
    data += line;
  }
  std::lock_guard lock(mu_);
  const std::uint64_t first = starts_.size();
  if (data.empty()) return first;
  write_all(data);
  for (auto len : lengths) {
    starts_.push_back(bytes_);
    bytes_ += len;
  }
  return first;
}

std::uint64_t EventLog::size() const {
  std::lock_guard lock(mu_);
  return starts_.size();
}

std::vector<LogRecord> EventLog::read(std::uint64_t begin,
                                      std::uint64_t end) const {
  std::uint64_t from_byte = 0, to_byte = 0;
  {
    std::lock_guard lock(mu_);
    end = std::min<std::uint64_t>(end, starts_.size());
    if (begin >= end) return {};
    from_byte = starts_[begin];
    to_byte = end < starts_.size() ? starts_[end] : bytes_;
  }
  std::string buf(to_byte - from_byte, '\0');
  std::size_t done = 0;
  while (done < buf.size()) {
    ssize_t n = ::pread(fd_, buf.data() + done, buf.size() - done,
                        static_cast<off_t>(from_byte + done));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError("read from " + path_ + " failed");
    done += static_cast<std::size_t>(n);
  }
  std::vector<LogRecord> out;
  out.reserve(end - begin);
  std::size_t pos = 0;
  for (std::uint64_t off = begin; off < end; ++off) {
    std::size_t nl = buf.find('\n', pos);
    out.push_back({off, buf.substr(pos, nl - pos)});
    pos = nl + 1;
  }
  return out;
}

Checkpoint::Checkpoint(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_, std::ios::binary);
  if (!in) return;
  std::ostringstream ss;
  ss << in.rdbuf();
  auto obj = nlohmann::json::parse(ss.str(), nullptr, false);
  if (obj.is_discarded() || !obj.is_object() || !obj.contains("offset") ||
      !obj["offset"].is_number_unsigned()) {
    throw ParseError("offset", "corrupt checkpoint file " + path_);
  }
  offset_ = obj["offset"].get<std::uint64_t>();
}

void Checkpoint::persist() const {
  const std::string tmp = path_ + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << nlohmann::json{{"offset", offset_}}.dump() << '\n';
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path_.c_str()) != 0) {
    throw IoError("cannot rename " + tmp);
  }
}

void Checkpoint::commit(std::uint64_t n) {
  if (n < offset_) {
    throw Error("checkpoint regression: " + std::to_string(n) + " < " +
                std::to_string(offset_));
  }
  offset_ = n;
  persist();
}

void Checkpoint::reset(std::uint64_t n) {
  offset_ = n;
  persist();
}

FeedbackApplier::FeedbackApplier(const EventLog& log, PriorStore& store,
                                 SessionRule rule,
                                 std::optional<std::string> checkpoint_path)
    : log_(log), store_(store), rule_(rule), tracker_(rule) {
  if (checkpoint_path) {
    checkpoint_file_.emplace(*checkpoint_path);
    checkpoint_ = checkpoint_file_->offset();
    if (checkpoint_ > log_.size()) {
      throw Error("checkpoint " + std::to_string(checkpoint_) +
                  " is past the end of the log (" +
                  std::to_string(log_.size()) + " records)");
    }
  }
}

FeedbackApplier::~FeedbackApplier() { stop(); }

std::size_t FeedbackApplier::fold(const SessionTracker::Ready& ready) {
  for (const auto& [user, ce] : ready) store_.apply(user, ce.carousel, ce.event);
  return ready.size();
}

ApplyResult FeedbackApplier::apply_range(std::uint64_t begin,
                                         std::uint64_t end) {
  std::lock_guard lock(mu_);
  ApplyResult result;
  result.begin = std::max(begin, checkpoint_);
  end = std::min(end, log_.size());
  result.end = end;
  if (begin > checkpoint_) {
    throw Error("offset gap: range starts at " + std::to_string(begin) +
                " but checkpoint is " + std::to_string(checkpoint_));
  }
  if (end <= checkpoint_) {
    result.rejected = begin < checkpoint_;
    result.end = checkpoint_;
    return result;
  }

  SessionTracker::Ready ready;
  for (const auto& rec : log_.read(checkpoint_, end)) {
    ++result.records;
    InteractionEvent e;
    try {
      e = parse_event(rec.line);
    } catch (const ParseError&) {
      ++result.skipped;
      warnings_.fetch_add(1);
      continue;
    }
    tracker_.observe(e, ready);
  }
  result.folded = fold(ready);
  checkpoint_ = end;
  if (checkpoint_file_) checkpoint_file_->commit(checkpoint_);
  store_.set_snapshot_meta(checkpoint_, tracker_.watermark());
  return result;
}

ApplyResult FeedbackApplier::apply_pending() {
  std::uint64_t from;
  {
    std::lock_guard lock(mu_);
    from = checkpoint_;
  }
  return apply_range(from, log_.size());
}

std::size_t FeedbackApplier::flush() {
  std::lock_guard lock(mu_);
  SessionTracker::Ready ready;
  tracker_.flush(ready);
  return fold(ready);
}

std::uint64_t FeedbackApplier::checkpoint() const {
  std::lock_guard lock(mu_);
  return checkpoint_;
}

void FeedbackApplier::reset_checkpoint(std::uint64_t offset) {
  std::lock_guard lock(mu_);
  if (offset > log_.size()) throw Error("checkpoint past end of log");
  checkpoint_ = offset;
  if (checkpoint_file_) checkpoint_file_->reset(offset);
}

std::uint64_t FeedbackApplier::late_events() const {
  std::lock_guard lock(mu_);
  return tracker_.late_events();
}

void FeedbackApplier::start(std::chrono::milliseconds interval) {
  stop();
  {
    std::lock_guard lock(worker_mu_);
    stopping_ = false;
  }
  worker_ = std::thread([this, interval] {
    std::unique_lock lock(worker_mu_);
    while (!worker_cv_.wait_for(lock, interval, [this] { return stopping_; })) {
      lock.unlock();
      try {
        apply_pending();
      } catch (const std::exception&) {
        warnings_.fetch_add(1);
      }
      lock.lock();
    }
  });
}

void FeedbackApplier::stop() {
  {
    std::lock_guard lock(worker_mu_);
    stopping_ = true;
  }
  worker_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void rebuild_priors(const EventLog& log, const PriorStore& base,
                    const SessionRule& rule, PriorStore& out) {
  out.copy_from(base);
  FeedbackApplier applier(log, out, rule);
  applier.apply_range(0, log.size());
}

}  // namespace crank
