#pragma once

// Precomputed synthon contributions and exhaustive constrained top-k search
// over the full product space of a library.
//
// A product's score for task i is the sum of its (R-group, synthon)
// contributions v_{i,r,s} plus the task bias b_i. Contributions are stored as
// float; the sum is accumulated in double, starting from 0.0, in R-group
// declaration order, with the bias added last. Every search variant uses that
// exact order, so their results agree bit for bit.
//
// Ranking is lexicographic on (violation, signed objective, -global index),
// higher is better. Violating products stay in the queue during the scan and
// are dropped afterwards, so a result can hold fewer than k entries.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apex/csl.hpp"
#include "apex/factorizer.hpp"
#include "apex/surrogate.hpp"

namespace apex {

class ContributionTable {
 public:
  ContributionTable() = default;
  /// `values` is task-major: values[task * pair_rows + row]. Throws
  /// apex::Error on shape mismatches or non-finite entries.
  ContributionTable(std::uint64_t library_fingerprint, std::vector<std::string> tasks,
                    std::vector<double> bias, std::size_t pair_rows, std::vector<float> values);

  std::uint64_t library_fingerprint() const { return fingerprint_; }
  const std::vector<std::string>& tasks() const { return tasks_; }
  std::size_t task_count() const { return tasks_.size(); }
  std::size_t pair_rows() const { return pair_rows_; }
  const std::vector<double>& bias() const { return bias_; }

  /// Throws apex::Error for unknown names.
  std::size_t task_index(std::string_view name) const;
  std::optional<std::size_t> find_task(std::string_view name) const;

  float value(std::size_t task, std::size_t row) const { return values_[task * pair_rows_ + row]; }
  const float* task_values(std::size_t task) const { return values_.data() + task * pair_rows_; }
  const std::vector<float>& values() const { return values_; }

  /// Throws apex::Error unless the table was built for `library`.
  void check_library(const CslLibrary& library) const;

 private:
  std::uint64_t fingerprint_ = 0;
  std::vector<std::string> tasks_;
  std::vector<double> bias_;
  std::size_t pair_rows_ = 0;
  std::vector<float> values_;
};

struct PrecomputeReport {
  std::uint64_t flops_per_task = 0;  // 2 * rows * d - rows
  std::uint64_t pair_rows = 0;
  std::size_t embedding_dim = 0;
};

/// v_{i,r,s} = w_i . u_{r,s} for every task of the surrogate and every cached
/// pair. Throws apex::Error if the cache belongs to another library or the
/// embedding dimensions differ.
ContributionTable precompute_contributions(const HierarchyCache& cache, const CslLibrary& library,
                                           const SurrogateModel& surrogate,
                                           PrecomputeReport* report = nullptr);

/// Flop count of the precompute for one task.
constexpr std::uint64_t precompute_flops(std::uint64_t rows, std::uint64_t d) {
  return rows == 0 ? 0 : 2 * rows * d - rows;
}

double apex_score(const ContributionTable& table, const CslLibrary& library, const MultiIndex& chi,
                  std::size_t task);
double apex_score(const ContributionTable& table, const CslLibrary& library, const MultiIndex& chi,
                  std::string_view task);

enum class Direction { maximize, minimize };

std::string to_string(Direction d);
Direction direction_from_string(std::string_view name);

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Closed interval lower <= value <= upper; either side may be infinite.
struct Constraint {
  std::string task;
  double lower = -kInf;
  double upper = kInf;
  friend bool operator==(const Constraint&, const Constraint&) = default;
};

struct QuerySpec {
  std::string objective;
  Direction direction = Direction::maximize;
  std::vector<Constraint> constraints;
  std::uint64_t k = 100;
};

/// Checks bounds (lower <= upper, no NaN, lower below +inf, upper above -inf)
/// and, when a table is given, that every task name resolves. Throws
/// apex::Error.
void validate_query(const QuerySpec& query, const ContributionTable* table = nullptr);

/// -(sum max(0, lower - f) + sum max(0, f - upper)); never returns -0.0.
double violation(std::span<const double> values, std::span<const Constraint> constraints);

struct ScoredCompound {
  std::uint64_t global_index = 0;
  MultiIndex chi;
  double objective = 0.0;  // in the query's own units (not sign-flipped)
  double violation = 0.0;
  std::vector<double> constraint_values;  // query constraint order
};

struct TopKResult {
  std::vector<ScoredCompound> items;  // best first
  std::uint64_t scanned = 0;
  std::uint64_t retained = 0;
  std::uint64_t discarded = 0;  // removed from the final queue for violation
  double scan_seconds = 0.0;
  double select_seconds = 0.0;
  double total_seconds = 0.0;

  double products_per_second() const {
    return scan_seconds > 0.0 ? static_cast<double>(scanned) / scan_seconds : 0.0;
  }
};

struct StreamOptions {
  std::size_t threads = 1;  // 0: hardware concurrency
  /// Optional sub-range [begin, end) of global indices; default is everything.
  std::optional<std::pair<std::uint64_t, std::uint64_t>> range;
};

TopKResult search_topk_stream(const CslLibrary& library, const ContributionTable& table,
                              const QuerySpec& query, const StreamOptions& options = {});

struct BatchedOptions {
  std::uint64_t chunk_size = 1 << 20;
  std::size_t threads = 1;
};

/// Batch boundaries used by search_topk_batched: consecutive [begin, end)
/// ranges made of whole (reaction, first-R-group) blocks, each at most
/// chunk_size products except a single block larger than chunk_size, which
/// forms its own batch.
std::vector<std::pair<std::uint64_t, std::uint64_t>> batch_partition(const CslLibrary& library,
                                                                     std::uint64_t chunk_size);

TopKResult search_topk_batched(const CslLibrary& library, const ContributionTable& table,
                               const QuerySpec& query, const BatchedOptions& options = {});

struct CostEstimate {
  std::uint64_t synthon_encoder_evaluations = 0;
  std::uint64_t products = 0;
  // Rows of the contribution table / cache: one per synthon when no synthon
  // is shared, one per (R-group, synthon) pair in general.
  std::uint64_t rows_no_sharing = 0;
  std::uint64_t rows_actual = 0;
  std::uint64_t cache_bytes_no_sharing = 0;  // rows * d * 4
  std::uint64_t cache_bytes_actual = 0;
  std::uint64_t precompute_flops_no_sharing = 0;  // per task
  std::uint64_t precompute_flops_actual = 0;
  std::uint64_t scoring_flops_per_task = 0;  // sum over products of component count
  std::uint64_t scoring_flops_total = 0;
  std::uint64_t table_bytes_actual = 0;  // rows * tasks * 4
  std::uint64_t queue_entries = 0;
};

CostEstimate cost_estimate(const CslLibrary& library, std::uint64_t d, std::uint64_t k,
                           std::uint64_t tasks = 1);

// Contribution table file, little-endian:
//   "APEXCTB1" | u32 version | u64 fingerprint | u32 tasks
//   tasks x (u32 name length, name bytes, f64 bias)
//   u64 rows | rows x (u32 rgroup, u32 synthon) | tasks x rows float32
void write_table(std::ostream& out, const ContributionTable& table, const CslLibrary& library);
ContributionTable read_table(std::istream& in);
void save_table(const ContributionTable& table, const CslLibrary& library, const std::string& path);
ContributionTable load_table(const std::string& path);

/// Tab-separated: rank, global_index, reaction_id, synthon_ids, objective,
/// violation, one column per constraint, and optionally the assembled product.
/// A query with k = 0 produces an empty file.
void write_topk(std::ostream& out, const TopKResult& result, const QuerySpec& query,
                const CslLibrary& library, bool with_product = false);
void save_topk(const TopKResult& result, const QuerySpec& query, const CslLibrary& library,
               const std::string& path, bool with_product = false);

}  // namespace apex
