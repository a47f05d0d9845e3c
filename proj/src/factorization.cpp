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

#include "crank/factorization.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>

namespace crank {

InteractionMatrix InteractionMatrix::from_triplets(
    std::vector<std::string> row_ids, std::vector<std::string> col_ids,
    std::span<const std::tuple<std::uint32_t, std::uint32_t, double>> cells) {
  InteractionMatrix m;
  m.row_ids_ = std::move(row_ids);
  m.col_ids_ = std::move(col_ids);

  std::map<std::pair<std::uint32_t, std::uint32_t>, double> merged;
  for (const auto& [r, c, v] : cells) {
    if (r >= m.row_ids_.size() || c >= m.col_ids_.size()) {
      throw ConfigError("interaction cell index out of range");
    }
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError("interaction counts must be positive and finite");
    }
    merged[{r, c}] += v;
  }

  m.nnz_ = merged.size();
  m.row_ptr_.assign(m.rows() + 1, 0);
  m.col_ptr_.assign(m.cols() + 1, 0);
  for (const auto& [rc, v] : merged) {
    ++m.row_ptr_[rc.first + 1];
    ++m.col_ptr_[rc.second + 1];
  }
  for (std::size_t i = 0; i < m.rows(); ++i) m.row_ptr_[i + 1] += m.row_ptr_[i];
  for (std::size_t i = 0; i < m.cols(); ++i) m.col_ptr_[i + 1] += m.col_ptr_[i];

  m.row_entries_.resize(m.nnz_);
  m.col_entries_.resize(m.nnz_);
  std::vector<std::size_t> row_fill(m.row_ptr_.begin(), m.row_ptr_.end() - 1);
  std::vector<std::size_t> col_fill(m.col_ptr_.begin(), m.col_ptr_.end() - 1);
  // `merged` iterates in (row, col) order, so both lists come out sorted.
  for (const auto& [rc, v] : merged) {
    m.row_entries_[row_fill[rc.first]++] = {rc.second, v};
    m.col_entries_[col_fill[rc.second]++] = {rc.first, v};
  }
  return m;
}

InteractionMatrix InteractionMatrix::from_counts(
    std::span<const std::tuple<std::string, std::string, double>> cells) {
  std::vector<std::string> rows, cols;
  for (const auto& [r, c, v] : cells) {
    rows.push_back(r);
    cols.push_back(c);
  }
  auto uniq = [](std::vector<std::string>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(rows);
  uniq(cols);
  auto index_of = [](const std::vector<std::string>& ids,
                     const std::string& id) {
    return static_cast<std::uint32_t>(
        std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };
  std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> triplets;
  triplets.reserve(cells.size());
  for (const auto& [r, c, v] : cells) {
    triplets.emplace_back(index_of(rows, r), index_of(cols, c), v);
  }
  return from_triplets(std::move(rows), std::move(cols), triplets);
}

std::span<const InteractionMatrix::Entry> InteractionMatrix::row(
    std::size_t r) const {
  return {row_entries_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
}

std::span<const InteractionMatrix::Entry> InteractionMatrix::col(
    std::size_t c) const {
  return {col_entries_.data() + col_ptr_[c], col_ptr_[c + 1] - col_ptr_[c]};
}

double InteractionMatrix::count(std::size_t r, std::size_t c) const {
  auto entries = row(r);
  auto it = std::lower_bound(
      entries.begin(), entries.end(), c,
      [](const Entry& e, std::size_t col) { return e.index < col; });
  return (it != entries.end() && it->index == c) ? it->count : 0.0;
}

InteractionMatrix build_matrix(std::span<const InteractionEvent> events,
                               MatrixAxis axis, const CategoryMap& catalog,
                               int window_days,
                               std::optional<std::int64_t> as_of) {
  if (window_days < 1) throw ConfigError("window_days must be >= 1");
  std::int64_t end_ts = 0;
  if (as_of) {
    end_ts = *as_of;
  } else {
    for (const auto& e : events) end_ts = std::max(end_ts, e.ts);
  }
  const std::int64_t start_ts =
      end_ts - static_cast<std::int64_t>(window_days) * 86400;

  std::map<std::pair<std::string, std::string>, double> counts;
  for (const auto& e : events) {
    if (e.event != EventType::kAtc || !e.item) continue;
    if (e.ts <= start_ts || e.ts > end_ts) continue;
    const std::string& col = axis == MatrixAxis::kItem
                                 ? e.item->str()
                                 : catalog.category_of(*e.item).str();
    counts[{e.user.str(), col}] += 1.0;
  }
  if (counts.empty()) throw Error("no transactions in window");

  std::vector<std::tuple<std::string, std::string, double>> cells;
  cells.reserve(counts.size());
  for (const auto& [key, n] : counts) cells.emplace_back(key.first, key.second, n);
  return InteractionMatrix::from_counts(cells);
}

void TrainConfig::validate() const {
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (!(reg > 0.0)) throw ConfigError("reg must be > 0");
  if (!(conf_alpha >= 0.0)) throw ConfigError("conf_alpha must be >= 0");
}

namespace {

Vector column_mean(const Matrix& f) {
  if (f.rows() == 0) return Vector::Zero(f.cols());
  return f.colwise().mean().transpose();
}

std::unordered_map<std::string, std::size_t> make_lookup(
    const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!out.emplace(ids[i], i).second) {
      throw ConfigError("duplicate embedding id " + ids[i]);
    }
  }
  return out;
}

}  // namespace

EmbeddingTable::EmbeddingTable(std::vector<std::string> row_ids,
                               std::vector<std::string> col_ids,
                               Matrix row_factors, Matrix col_factors)
    : row_ids_(std::move(row_ids)),
      col_ids_(std::move(col_ids)),
      row_factors_(std::move(row_factors)),
      col_factors_(std::move(col_factors)) {
  if (row_factors_.rows() != static_cast<Eigen::Index>(row_ids_.size()) ||
      col_factors_.rows() != static_cast<Eigen::Index>(col_ids_.size())) {
    throw ConfigError("embedding ids do not match factor rows");
  }
  if (row_factors_.cols() != col_factors_.cols()) {
    throw ConfigError("row and column factors differ in dimension");
  }
  if (!row_factors_.allFinite() || !col_factors_.allFinite()) {
    throw ConfigError("embedding contains non-finite values");
  }
  row_lookup_ = make_lookup(row_ids_);
  col_lookup_ = make_lookup(col_ids_);
  mean_row_ = column_mean(row_factors_);
  mean_col_ = column_mean(col_factors_);
}

std::optional<std::size_t> EmbeddingTable::row_index(std::string_view id) const {
  auto it = row_lookup_.find(std::string(id));
  if (it == row_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> EmbeddingTable::col_index(std::string_view id) const {
  auto it = col_lookup_.find(std::string(id));
  if (it == col_lookup_.end()) return std::nullopt;
  return it->second;
}

namespace als {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_finite(const Matrix& f, const char* side) {
  if (!f.allFinite()) {
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      if (!f.row(r).allFinite()) {
        throw Error(std::string("ALS produced non-finite ") + side +
                    " factor at row " + std::to_string(r));
      }
    }
  }
}

}  // namespace

void init_factors(std::span<const std::string> ids, int dim,
                  std::uint64_t seed, std::uint64_t stream, Matrix& out) {
  out.resize(static_cast<Eigen::Index>(ids.size()), dim);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(stream)) ^
                        fnv1a(ids[r]));
    std::uniform_real_distribution<double> dist(-0.05, 0.05);
    for (int d = 0; d < dim; ++d) out(static_cast<Eigen::Index>(r), d) = dist(rng);
  }
}

Vector solve_row(std::span<const InteractionMatrix::Entry> observed,
                 const Matrix& other, const Matrix& gramian,
                 const TrainConfig& cfg) {
  const Eigen::Index dim = other.cols();
  Matrix a = gramian;
  a.diagonal().array() += cfg.reg;
  Vector b = Vector::Zero(dim);
  for (const auto& e : observed) {
    const double confidence = 1.0 + cfg.conf_alpha * e.count;
    auto y = other.row(e.index);
    a.noalias() += (confidence - 1.0) * y.transpose() * y;
    b.noalias() += confidence * y.transpose();
  }
  Eigen::LLT<Matrix> llt(a);
  // reg > 0 keeps `a` positive definite; failure means non-finite input.
  if (llt.info() != Eigen::Success) {
    throw Error("ALS normal equations are not positive definite");
  }
  return llt.solve(b);
}

void half_sweep_serial(const InteractionMatrix& m, RowAccessor by_target,
                       const Matrix& other, Matrix& target,
                       const TrainConfig& cfg) {
  const Matrix gramian = other.transpose() * other;
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    target.row(r) =
        solve_row((m.*by_target)(static_cast<std::size_t>(r)), other, gramian,
                  cfg)
            .transpose();
  }
}

void half_sweep_parallel(const InteractionMatrix& m, RowAccessor by_target,
                         const Matrix& other, Matrix& target,
                         const TrainConfig& cfg) {
  const Matrix gramian = other.transpose() * other;
  const Eigen::Index n = target.rows();
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (Eigen::Index r = 0; r < n; ++r) {
    try {
      target.row(r) =
          solve_row((m.*by_target)(static_cast<std::size_t>(r)), other,
                    gramian, cfg)
              .transpose();
    } catch (...) {
#pragma omp critical(crank_als_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace als

AlsTrainer::AlsTrainer(const InteractionMatrix& m, TrainConfig cfg,
                       Execution exec)
    : m_(m), cfg_(cfg), exec_(exec) {
  cfg_.validate();
  if (m_.nnz() == 0) throw ConfigError("cannot train on an empty matrix");
  als::init_factors(m_.row_ids(), cfg_.dim, cfg_.seed, /*stream=*/1, users_);
  als::init_factors(m_.col_ids(), cfg_.dim, cfg_.seed, /*stream=*/2, items_);
}

void AlsTrainer::user_sweep() {
  if (exec_ == Execution::kParallel) {
    als::half_sweep_parallel(m_, &InteractionMatrix::row, items_, users_, cfg_);
  } else {
    als::half_sweep_serial(m_, &InteractionMatrix::row, items_, users_, cfg_);
  }
  als::check_finite(users_, "user");
}

void AlsTrainer::item_sweep() {
  if (exec_ == Execution::kParallel) {
    als::half_sweep_parallel(m_, &InteractionMatrix::col, users_, items_, cfg_);
  } else {
    als::half_sweep_serial(m_, &InteractionMatrix::col, users_, items_, cfg_);
  }
  als::check_finite(items_, "item");
}

void AlsTrainer::run() {
  for (int it = 0; it < cfg_.iterations; ++it) {
    user_sweep();
    item_sweep();
  }
}

EmbeddingTable AlsTrainer::table() const {
  return EmbeddingTable(m_.row_ids(), m_.col_ids(), users_, items_);
}

EmbeddingTable train_als(const InteractionMatrix& m, const TrainConfig& cfg,
                         Execution exec) {
  AlsTrainer trainer(m, cfg, exec);
  trainer.run();
  return trainer.table();
}

double als_objective(const InteractionMatrix& m, const Matrix& users,
                     const Matrix& items, const TrainConfig& cfg) {
  if (users.rows() != static_cast<Eigen::Index>(m.rows()) ||
      items.rows() != static_cast<Eigen::Index>(m.cols()) ||
      users.cols() != items.cols()) {
    throw ConfigError("factor shapes do not match the interaction matrix");
  }
  // Every cell costs (x.y)^2 at weight 1; observed cells then swap that
  // for c (1 - x.y)^2.
  const Matrix gu = users.transpose() * users;
  const Matrix gi = items.transpose() * items;
  double total = gu.cwiseProduct(gi).sum();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto x = users.row(static_cast<Eigen::Index>(r));
    for (const auto& e : m.row(r)) {
      const double s = x.dot(items.row(e.index));
      const double confidence = 1.0 + cfg.conf_alpha * e.count;
      total += confidence * (1.0 - s) * (1.0 - s) - s * s;
    }
  }
  total += cfg.reg * (users.squaredNorm() + items.squaredNorm());
  return total;
}

double als_objective(const InteractionMatrix& m, const EmbeddingTable& t,
                     const TrainConfig& cfg) {
  if (t.row_ids() != m.row_ids() || t.col_ids() != m.col_ids()) {
    throw ConfigError("embedding ids do not match the interaction matrix");
  }
  return als_objective(m, t.row_factors(), t.col_factors(), cfg);
}

double predict_affinity(const EmbeddingTable& t, std::string_view user,
                        std::string_view item) {
  auto col = t.col_index(item);
  if (!col) {
    throw LookupError(std::string(item),
                      "no embedding for item " + std::string(item));
  }
  auto y = t.col_factors().row(static_cast<Eigen::Index>(*col));
  if (auto row = t.row_index(user)) {
    return t.row_factors().row(static_cast<Eigen::Index>(*row)).dot(y);
  }
  return t.mean_row().dot(y.transpose());
}

namespace {

void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

void format_block(std::string& out, const std::vector<std::string>& ids,
                  const Matrix& f) {
  out += "dim=" + std::to_string(f.cols()) +
         " rows=" + std::to_string(ids.size()) + "\n";
  for (std::size_t r = 0; r < ids.size(); ++r) {
    out += ids[r];
    for (Eigen::Index d = 0; d < f.cols(); ++d) {
      out += ' ';
      append_double(out, f(static_cast<Eigen::Index>(r), d));
    }
    out += '\n';
  }
}

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  std::optional<std::string_view> next() {
    while (pos_ < text_.size()) {
      std::size_t end = text_.find('\n', pos_);
      if (end == std::string_view::npos) end = text_.size();
      std::string_view line = text_.substr(pos_, end - pos_);
      pos_ = end + 1;
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty()) return line;
    }
    return std::nullopt;
  }
  std::size_t line_no() const { return line_no_; }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_no_ = 0;
};

std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    std::size_t start = line.find_first_not_of(' ', pos);
    if (start == std::string_view::npos) break;
    std::size_t end = line.find(' ', start);
    if (end == std::string_view::npos) end = line.size();
    out.push_back(line.substr(start, end - start));
    pos = end;
  }
  return out;
}

std::size_t parse_size(std::string_view s, std::string_view key,
                       std::size_t line_no) {
  std::size_t v = 0;
  if (!s.starts_with(key)) {
    throw ParseError(std::string(key), "embedding header line " +
                                           std::to_string(line_no) +
                                           ": expected " + std::string(key));
  }
  s.remove_prefix(key.size());
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(std::string(key), "embedding header line " +
                                           std::to_string(line_no) +
                                           ": bad number");
  }
  return v;
}

std::pair<std::vector<std::string>, Matrix> parse_block(LineReader& reader,
                                                        bool required) {
  auto header = reader.next();
  if (!header) {
    if (required) throw ParseError("", "embedding file: missing block header");
    return {};
  }
  auto parts = split_spaces(*header);
  if (parts.size() != 2) {
    throw ParseError("", "embedding header line " +
                             std::to_string(reader.line_no()) +
                             ": expected 'dim=<n> rows=<r>'");
  }
  const std::size_t dim = parse_size(parts[0], "dim=", reader.line_no());
  const std::size_t rows = parse_size(parts[1], "rows=", reader.line_no());
  if (dim == 0) throw ParseError("dim", "embedding dim must be >= 1");

  std::vector<std::string> ids;
  ids.reserve(rows);
  Matrix f(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < rows; ++r) {
    auto line = reader.next();
    if (!line) throw ParseError("", "embedding file truncated");
    auto tokens = split_spaces(*line);
    if (tokens.size() != dim + 1) {
      throw ParseError("", "embedding line " +
                               std::to_string(reader.line_no()) + ": expected " +
                               std::to_string(dim + 1) + " fields");
    }
    ids.emplace_back(tokens[0]);
    for (std::size_t d = 0; d < dim; ++d) {
      double v = 0.0;
      auto tok = tokens[d + 1];
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() ||
          !std::isfinite(v)) {
        throw ParseError("", "embedding line " +
                                 std::to_string(reader.line_no()) +
                                 ": bad value '" + std::string(tok) + "'");
      }
      f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = v;
    }
  }
  return {std::move(ids), std::move(f)};
}

}  // namespace

std::string format_embeddings(const EmbeddingTable& t) {
  std::string out;
  format_block(out, t.row_ids(), t.row_factors());
  format_block(out, t.col_ids(), t.col_factors());
  return out;
}

EmbeddingTable parse_embeddings(std::string_view text) {
  LineReader reader(text);
  auto [row_ids, rows] = parse_block(reader, true);
  auto [col_ids, cols] = parse_block(reader, true);
  if (rows.cols() != cols.cols()) {
    throw ParseError("dim", "row and column blocks differ in dim");
  }
  if (reader.next()) throw ParseError("", "trailing data in embedding file");
  return EmbeddingTable(std::move(row_ids), std::move(col_ids),
                        std::move(rows), std::move(cols));
}

void write_embeddings(const EmbeddingTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << format_embeddings(t);
  if (!out) throw IoError("write failed for " + path);
}

EmbeddingTable read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_embeddings(ss.str());
}

}  // namespace crank
