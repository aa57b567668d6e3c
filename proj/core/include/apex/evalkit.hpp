#pragma once

// Ground-truth evaluation: exhaustive oracle top-k, recall, constraint
// satisfaction, score CDF export and a Thompson sampling baseline.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apex/csl.hpp"
#include "apex/engine.hpp"
#include "apex/props.hpp"

namespace apex {

/// Largest product range oracle_topk will enumerate.
inline constexpr std::uint64_t kOracleGuard = 100'000'000;

struct OracleTopK {
  std::vector<ScoredCompound> items;  // feasible only, best first
  std::uint64_t evaluated = 0;
  std::uint64_t feasible = 0;
};

struct OracleOptions {
  std::size_t threads = 1;
  std::optional<std::pair<std::uint64_t, std::uint64_t>> range;  // default: whole library
};

/// True top-j feasible products under the oracle, ranked by objective with the
/// engine's tie-break (lower global index wins). Throws apex::Error when the
/// range exceeds kOracleGuard products or a task is unknown.
OracleTopK oracle_topk(const CslLibrary& library, const GroundTruthOracle& oracle,
                       const QuerySpec& query, std::uint64_t j, const OracleOptions& options = {});

/// |truth ∩ retrieved| / |truth| by product identity; empty when truth is
/// empty.
std::optional<double> recall_j_at_k(std::span<const ScoredCompound> truth,
                                    std::span<const ScoredCompound> retrieved);
std::optional<double> recall_j_at_k(const OracleTopK& truth, const TopKResult& retrieved);

/// Fraction of `retrieved` whose oracle values satisfy every constraint.
/// 1.0 when there are no constraints; empty when nothing was retrieved.
std::optional<double> satisfaction_rate(std::span<const ScoredCompound> retrieved,
                                        const GroundTruthOracle& oracle,
                                        std::span<const Constraint> constraints);

/// Fraction of library products satisfying the constraints under the oracle,
/// over a seeded uniform sample (exhaustive when sample_size >= products).
double base_rate(const CslLibrary& library, const GroundTruthOracle& oracle,
                 std::span<const Constraint> constraints, std::uint64_t sample_size,
                 std::uint64_t seed);

struct CdfRow {
  std::string label;
  double score = 0.0;
  double cumulative = 0.0;
};

/// Empirical CDF rows per labelled score set, scores ascending within a label.
std::vector<CdfRow> score_cdf_export(std::span<const std::pair<std::string, std::vector<double>>> sets);
void write_cdf(std::ostream& out, std::span<const CdfRow> rows);

// ---------------------------------------------------------------------------
// Thompson sampling

/// Wraps an objective and counts every call.
class CountingObjective {
 public:
  explicit CountingObjective(std::function<double(const MultiIndex&)> fn) : fn_(std::move(fn)) {}
  double operator()(const MultiIndex& chi) {
    ++calls_;
    return fn_(chi);
  }
  std::uint64_t calls() const { return calls_; }

 private:
  std::function<double(const MultiIndex&)> fn_;
  std::uint64_t calls_ = 0;
};

struct TsConfig {
  /// Warmup evaluations per synthon; default 3 for two-component reactions
  /// and 10 otherwise.
  std::optional<std::size_t> warmup;
  std::size_t iterations = 100;  // 0 runs the warmup only
  Direction direction = Direction::maximize;
  // Arm prior and observation noise; estimated from the warmup scores when
  // unset.
  std::optional<double> prior_mean;
  std::optional<double> prior_variance;
  std::optional<double> noise_variance;
  std::uint64_t seed = 0;
};

std::size_t default_warmup(std::size_t components);

struct TsResult {
  ReactionId reaction = 0;
  std::size_t warmup = 0;
  std::vector<std::uint64_t> evaluated;  // global indices in evaluation order
  std::vector<double> values;            // objective values, same order
  std::vector<double> best_so_far;       // best value after each evaluation
  std::uint64_t oracle_calls = 0;
};

/// Every evaluation counts against the budget |S_t| * w + i, including
/// repeated products.
TsResult thompson_sampling(const CslLibrary& library, ReactionId reaction,
                           CountingObjective& objective, const TsConfig& config);

struct CompareConfig {
  std::string objective;
  Direction direction = Direction::maximize;
  std::vector<std::size_t> iterations = {100, 1000, 10000};
  std::vector<std::uint64_t> seeds;
  std::vector<std::uint64_t> js = {10, 100};
  std::vector<ReactionId> reactions;  // empty: every reaction
  std::size_t threads = 1;
};

struct CompareRow {
  ReactionId reaction = 0;
  std::size_t iterations = 0;
  std::uint64_t budget = 0;  // total TS evaluations = APEX k
  std::vector<double> apex_recall;  // per j
  std::vector<double> ts_median;    // per j, over seeds
  std::vector<double> ts_q1;
  std::vector<double> ts_q3;
};

struct CompareReport {
  std::vector<std::uint64_t> js;
  std::vector<std::uint64_t> seeds;
  std::vector<CompareRow> rows;  // reactions x iteration counts
};

CompareReport compare_apex_vs_ts(const CslLibrary& library, const GroundTruthOracle& oracle,
                                 const ContributionTable& table, const CompareConfig& config);
void write_compare(std::ostream& out, const CompareReport& report);

/// Linear-interpolated quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

}  // namespace apex
