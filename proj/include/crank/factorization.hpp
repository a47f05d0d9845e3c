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

#include <cstdint>
#include <optional>
#include <span>
#include <tuple>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "crank/domain.hpp"

namespace crank {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Sparse, strictly positive counts keyed by (row, column). Rows are users;
// columns are items or categories. Ids are kept sorted so that dense
// indices are a pure function of the id sets.
class InteractionMatrix {
 public:
  struct Entry {
    std::uint32_t index;  // column index in a row list, row index in a column list
    double count;
  };

  InteractionMatrix() = default;

  // Duplicate (row, col) triplets are summed. Non-positive counts throw.
  static InteractionMatrix from_triplets(
      std::vector<std::string> row_ids, std::vector<std::string> col_ids,
      std::span<const std::tuple<std::uint32_t, std::uint32_t, double>> cells);

  // Convenience: id-keyed triplets; id lists are derived and sorted.
  static InteractionMatrix from_counts(
      std::span<const std::tuple<std::string, std::string, double>> cells);

  std::size_t rows() const { return row_ids_.size(); }
  std::size_t cols() const { return col_ids_.size(); }
  std::size_t nnz() const { return nnz_; }

  const std::vector<std::string>& row_ids() const { return row_ids_; }
  const std::vector<std::string>& col_ids() const { return col_ids_; }

  std::span<const Entry> row(std::size_t r) const;
  std::span<const Entry> col(std::size_t c) const;

  // 0 when absent.
  double count(std::size_t r, std::size_t c) const;

 private:
  std::vector<std::string> row_ids_;
  std::vector<std::string> col_ids_;
  std::vector<std::size_t> row_ptr_;
  std::vector<Entry> row_entries_;
  std::vector<std::size_t> col_ptr_;
  std::vector<Entry> col_entries_;
  std::size_t nnz_ = 0;
};

enum class MatrixAxis { kItem, kCategory };

// Counts ATC events per (user, item) or per (user, category(item)) within
// the trailing `window_days` ending at `as_of` (defaults to the latest
// event timestamp). Throws Error("no transactions in window") if empty.
InteractionMatrix build_matrix(std::span<const InteractionEvent> events,
                               MatrixAxis axis, const CategoryMap& catalog,
                               int window_days,
                               std::optional<std::int64_t> as_of = {});

struct TrainConfig {
  int dim = 32;
  int iterations = 15;
  double reg = 0.01;
  double conf_alpha = 40.0;
  std::uint64_t seed = 0;

  // Throws ConfigError on dim < 1, iterations < 1, reg <= 0, conf_alpha < 0.
  void validate() const;
};

// Row and column factor vectors with id <-> index maps.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<std::string> row_ids,
                 std::vector<std::string> col_ids, Matrix row_factors,
                 Matrix col_factors);

  int dim() const { return static_cast<int>(row_factors_.cols()); }
  const std::vector<std::string>& row_ids() const { return row_ids_; }
  const std::vector<std::string>& col_ids() const { return col_ids_; }
  const Matrix& row_factors() const { return row_factors_; }
  const Matrix& col_factors() const { return col_factors_; }

  std::optional<std::size_t> row_index(std::string_view id) const;
  std::optional<std::size_t> col_index(std::string_view id) const;

  // Mean of all row vectors; stands in for cold rows.
  const Vector& mean_row() const { return mean_row_; }
  const Vector& mean_col() const { return mean_col_; }

 private:
  std::vector<std::string> row_ids_;
  std::vector<std::string> col_ids_;
  Matrix row_factors_;
  Matrix col_factors_;
  std::unordered_map<std::string, std::size_t> row_lookup_;
  std::unordered_map<std::string, std::size_t> col_lookup_;
  Vector mean_row_;
  Vector mean_col_;
};

enum class Execution { kSerial, kParallel };

// Alternating least squares on confidence-weighted binary preferences.
// Exposes the half-sweeps so callers can observe the objective between
// them.
class AlsTrainer {
 public:
  AlsTrainer(const InteractionMatrix& m, TrainConfig cfg,
             Execution exec = Execution::kParallel);

  void user_sweep();
  void item_sweep();
  void run();  // cfg.iterations x (user_sweep, item_sweep)

  const Matrix& user_factors() const { return users_; }
  const Matrix& item_factors() const { return items_; }
  Matrix& mutable_user_factors() { return users_; }
  Matrix& mutable_item_factors() { return items_; }

  EmbeddingTable table() const;

 private:
  const InteractionMatrix& m_;
  TrainConfig cfg_;
  Execution exec_;
  Matrix users_;
  Matrix items_;
};

EmbeddingTable train_als(const InteractionMatrix& m, const TrainConfig& cfg,
                         Execution exec = Execution::kParallel);

// Exact objective
//   sum_{all u,i} c_ui (p_ui - x_u.y_i)^2 + reg (sum |x_u|^2 + sum |y_i|^2)
// computed via gramians plus a correction over observed cells.
double als_objective(const InteractionMatrix& m, const EmbeddingTable& t,
                     const TrainConfig& cfg);
double als_objective(const InteractionMatrix& m, const Matrix& users,
                     const Matrix& items, const TrainConfig& cfg);

// x_u . y_i; a cold user uses the mean row vector. Unknown item throws
// LookupError.
double predict_affinity(const EmbeddingTable& t, std::string_view user,
                        std::string_view item);

namespace als {

// One least-squares half-sweep: re-solves every row of `target` against the
// fixed `other` factors, using rows (or columns) of the matrix given by
// `by_target`. The serial and parallel kernels solve each row with the
// same arithmetic, so their results are bit-identical.
using RowAccessor = std::span<const InteractionMatrix::Entry> (
    InteractionMatrix::*)(std::size_t) const;

void half_sweep_serial(const InteractionMatrix& m, RowAccessor by_target,
                       const Matrix& other, Matrix& target,
                       const TrainConfig& cfg);
void half_sweep_parallel(const InteractionMatrix& m, RowAccessor by_target,
                         const Matrix& other, Matrix& target,
                         const TrainConfig& cfg);

// Solves (G + sum_obs (c-1) y y^T + reg I) x = sum_obs c y for one row.
Vector solve_row(std::span<const InteractionMatrix::Entry> observed,
                 const Matrix& other, const Matrix& gramian,
                 const TrainConfig& cfg);

// Deterministic uniform(-0.05, 0.05) init keyed by (seed, id), so a row's
// starting vector does not depend on its position in the matrix.
void init_factors(std::span<const std::string> ids, int dim,
                  std::uint64_t seed, std::uint64_t stream, Matrix& out);

}  // namespace als

// Embedding file: for each of the row and column blocks, a header line
// `dim=<n> rows=<r>` followed by `<id> <v1> ... <vn>` lines. Values use
// the shortest round-trip representation.
void write_embeddings(const EmbeddingTable& t, const std::string& path);
EmbeddingTable read_embeddings(const std::string& path);
EmbeddingTable parse_embeddings(std::string_view text);
std::string format_embeddings(const EmbeddingTable& t);

}  // namespace crank
