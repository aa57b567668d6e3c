#pragma once

// Synthon/product feature extraction, a synthetic ground-truth oracle, and
// labeled dataset I/O.

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apex/csl.hpp"

namespace apex {

using FeatureVector = Eigen::VectorXd;

struct FeatureConfig {
  std::size_t dim = 64;          // p: hashed n-gram buckets
  std::size_t cross_terms = 16;  // q: random projections of the cross product
  std::size_t max_ngram = 3;
  double scale = 0.5;
  std::uint64_t seed = 0x5eedf00dULL;

  std::size_t product_dim() const { return dim + cross_terms; }
};

/// Counts of token n-grams (n = 1..max_ngram) hashed into `dim` buckets,
/// multiplied by `scale`.
FeatureVector synthon_features(std::string_view token, const FeatureConfig& config = {});

/// Synthon features for a whole library plus the fixed cross-term projection.
class FeatureTable {
 public:
  FeatureTable(const CslLibrary& library, FeatureConfig config = {});

  const FeatureConfig& config() const { return config_; }
  std::size_t synthon_dim() const { return config_.dim; }
  std::size_t product_dim() const { return config_.product_dim(); }

  /// Column s holds synthon s's feature vector.
  const Eigen::MatrixXd& synthons() const { return synthon_features_; }
  auto synthon(SynthonId s) const { return synthon_features_.col(s); }

  /// First `dim` entries: sum of constituent synthon features. Remaining
  /// `cross_terms` entries: projection of the elementwise product of the two
  /// largest-norm synthon vectors (a single synthon is paired with itself;
  /// norm ties go to the earlier R-group).
  FeatureVector product_features(const MultiIndex& chi) const;
  void product_features(const MultiIndex& chi, Eigen::Ref<Eigen::VectorXd> out) const;

 private:
  FeatureConfig config_;
  Eigen::MatrixXd synthon_features_;
  Eigen::VectorXd synthon_norms_;
  Eigen::MatrixXd projection_;  // cross_terms x dim
};

FeatureVector product_features(const CslLibrary& library, const MultiIndex& chi,
                               const FeatureConfig& config = {});

// ---------------------------------------------------------------------------
// Ground-truth oracle

struct TaskDef {
  std::string name;
  bool nonlinear = false;
  bool pairwise = false;
  // Per-synthon latent contribution is gamma . synthon_features(token) with
  // gamma_j = weight_mean + weight_sd * z_j, z_j seeded standard normals.
  double weight_mean = 0.0;
  double weight_sd = 1.0;
  double offset = 0.0;  // added once per product
  double nonlinear_scale = 0.0;
  double nonlinear_alpha = 1.0;
  double pairwise_density = 0.1;
  double pairwise_scale = 0.0;
  double noise = 0.0;  // deterministic hashed noise, per (product, task)

  std::string mode() const;  // "additive", "additive+nonlinear", ...
};

/// Parses "additive", "additive+nonlinear", "additive+pairwise" or
/// "additive+nonlinear+pairwise" into the two flags.
void parse_task_mode(std::string_view mode, TaskDef& task);

struct OracleConfig {
  std::vector<TaskDef> tasks;
  std::uint64_t seed = 0;
  FeatureConfig features;
};

/// Five docking-like objectives (dock0..dock4, additive+nonlinear+pairwise)
/// and six property-like tasks (mw, logp, hbd, hba, rotb, tpsa; additive).
OracleConfig default_oracle_config(std::uint64_t seed);
/// Same task names, every task purely additive.
OracleConfig additive_oracle_config(std::uint64_t seed);

std::string oracle_config_to_json(const OracleConfig& config);
OracleConfig oracle_config_from_json(std::string_view text);
void save_oracle_config(const OracleConfig& config, const std::string& path);
OracleConfig load_oracle_config(const std::string& path);

class GroundTruthOracle {
 public:
  GroundTruthOracle(OracleConfig config, const CslLibrary& library);

  const OracleConfig& config() const { return config_; }
  std::size_t task_count() const { return config_.tasks.size(); }
  /// Throws apex::Error for unknown names.
  std::size_t task_index(std::string_view name) const;
  std::vector<std::string> task_names() const;

  double latent(std::size_t task, SynthonId s) const { return latents_[task][s]; }
  void set_latent(std::size_t task, SynthonId s, double value) { latents_[task][s] = value; }

  double evaluate(const MultiIndex& chi, std::size_t task) const;
  double evaluate(const MultiIndex& chi, std::string_view task) const {
    return evaluate(chi, task_index(task));
  }

 private:
  OracleConfig config_;
  std::vector<std::uint64_t> task_keys_;
  std::vector<std::vector<double>> latents_;  // [task][synthon]
  std::vector<std::uint64_t> token_hash_;     // per synthon
};

double ground_truth(const GroundTruthOracle& oracle, const MultiIndex& chi,
                    std::string_view task);

// ---------------------------------------------------------------------------
// Labeled datasets

struct LabelRow {
  MultiIndex chi;
  std::string task;
  double value = 0.0;
};

struct LabeledDataset {
  std::vector<LabelRow> rows;
  std::vector<std::string> task_names() const;  // first-appearance order
};

struct SampleSpec {
  bool full = false;       // enumerate every product
  std::uint64_t size = 0;  // otherwise: distinct uniform draws of GlobalIndex
  std::uint64_t seed = 0;
};

/// Sorted distinct uniform sample of global indices in [0, n).
std::vector<std::uint64_t> sample_indices(std::uint64_t n, std::uint64_t count,
                                          std::uint64_t seed);

LabeledDataset label_library(const GroundTruthOracle& oracle, const CslLibrary& library,
                             std::span<const std::string> tasks, const SampleSpec& sample);

// Tab-separated, one header line:
//   reaction_id <TAB> synthon_ids <TAB> task <TAB> value
// synthon_ids is a comma-separated list in R-group order.
void write_labels(std::ostream& out, const LabeledDataset& dataset);
LabeledDataset read_labels(std::istream& in, const CslLibrary& library);
void save_labels(const LabeledDataset& dataset, const std::string& path);
LabeledDataset load_labels(const std::string& path, const CslLibrary& library);

}  // namespace apex
