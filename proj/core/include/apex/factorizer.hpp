#pragma once

// Reaction factorizer. Synthon, R-group and reaction embeddings are built
// bottom-up (R-groups and reactions through deep-set encoders), and a product
// embedding is reconstructed as the sum over its (R-group, synthon) pairs of
// u_{r,s} = K_r v_s, with K_r conditioned on the R-group and its reaction and
// v_s on the synthon alone.
//
// Deep-set pooling is a mean whose summation runs over the member vectors in
// lexicographic order of their values, so set encoders are bit-identical
// under any permutation of their inputs (tolerance 0).

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apex/csl.hpp"
#include "apex/nn.hpp"
#include "apex/props.hpp"
#include "apex/surrogate.hpp"

namespace apex {

struct FactorizerConfig {
  std::size_t synthon_dim = 64;   // d_S
  std::size_t rgroup_dim = 64;    // d_R
  std::size_t reaction_dim = 64;  // d_T
  std::size_t value_dim = 32;     // d_U
  std::size_t hidden = 64;
  std::size_t embedding_dim = 64;  // d, must match the surrogate
  nn::Activation activation = nn::Activation::silu;
};

/// Elementwise network, mean pooling, post-pooling network.
struct DeepSet {
  nn::Mlp element;
  nn::Mlp post;

  void collect(nn::ParamList& out);
  void collect(nn::ConstParamList& out) const;
};

class Factorizer {
 public:
  Factorizer() = default;
  Factorizer(const FactorizerConfig& config, FeatureConfig synthon_features, std::uint64_t seed);
  static Factorizer zeros(const FactorizerConfig& config, FeatureConfig synthon_features);

  const FactorizerConfig& config() const { return config_; }
  /// Synthon featurisation; only dim/max_ngram/scale/seed are used.
  const FeatureConfig& feature_config() const { return features_; }

  nn::Mlp synthon_encoder;  // features -> d_S
  DeepSet rgroup_encoder;   // {d_S} -> d_R
  DeepSet reaction_encoder; // {d_R} -> d_T
  nn::Mlp value_encoder;    // d_S -> d_U
  nn::Mlp key_encoder;      // d_R ++ d_T -> d * d_U (column-major d x d_U)

  void collect(nn::ParamList& out);
  void collect(nn::ConstParamList& out) const;
  std::uint64_t checksum() const;

 private:
  FactorizerConfig config_;
  FeatureConfig features_;
};

/// Mean of the columns of `members` listed in `ids`, accumulated in
/// lexicographic order of the column values.
Eigen::VectorXd canonical_mean(const Eigen::MatrixXd& members, std::span<const Eigen::Index> ids);

struct HierarchyCache {
  std::uint64_t library_fingerprint = 0;
  Eigen::MatrixXd synthon;      // d_S x |S|
  Eigen::MatrixXd rgroup;       // d_R x |R|
  Eigen::MatrixXd reaction;     // d_T x |T|
  Eigen::MatrixXd value;        // d_U x |S|
  Eigen::MatrixXd associative;  // d x pairs; column library.pair_offset(r) + position
  std::uint64_t synthon_encoder_evaluations = 0;

  std::size_t embedding_dim() const { return static_cast<std::size_t>(associative.rows()); }
  std::size_t pair_rows() const { return static_cast<std::size_t>(associative.cols()); }
  /// Memory for the associative embeddings at `real_bytes` per entry.
  std::uint64_t associative_bytes(std::size_t real_bytes = 4) const {
    return static_cast<std::uint64_t>(associative.size()) * real_bytes;
  }
};

HierarchyCache encode_hierarchy(const Factorizer& factorizer, const CslLibrary& library);

/// Sum of cached u_{r,s} over the pairs of chi. Throws apex::Error if a pair
/// is not eligible or the cache does not belong to this library.
Eigen::VectorXd reconstruct(const HierarchyCache& cache, const CslLibrary& library,
                            const MultiIndex& chi);

/// Same quantity computed from scratch for one product: encodes only the
/// synthons, R-groups and reaction chi touches.
Eigen::VectorXd reconstruct_direct(const Factorizer& factorizer, const CslLibrary& library,
                                   const MultiIndex& chi);

/// Mean squared reconstruction error over a batch with fixed targets
/// (embedding_dim x B). Accumulates gradients into `grad` when non-null.
double factorizer_objective(const Factorizer& factorizer, const CslLibrary& library,
                            const Eigen::MatrixXd& synthon_features,
                            std::span<const MultiIndex> batch, const Eigen::MatrixXd& targets,
                            Factorizer* grad);

struct FactorizerTrainConfig {
  enum class Sampling { uniform_product, uniform_reaction };

  std::size_t steps = 3000;
  std::size_t batch_size = 256;
  double learning_rate = 2e-3;
  double final_learning_rate = 1e-5;
  std::uint64_t seed = 0;
  Sampling sampling = Sampling::uniform_product;
  std::size_t log_every = 0;  // record loss every n steps (0: only the last)
  // Alternating least-squares rounds run after the gradient phase. Each round
  // refits the key encoder's output layer, then the value encoder's output
  // layer, exactly on a fixed product sample; a refit that does not lower the
  // sample loss is discarded.
  std::size_t refine_rounds = 2;
  std::size_t refine_samples = 8192;
};

struct FactorizerTrainReport {
  std::vector<std::pair<std::size_t, double>> loss;  // (step, minibatch loss)
  std::uint64_t surrogate_checksum_before = 0;
  std::uint64_t surrogate_checksum_after = 0;
  std::vector<double> refine_loss;  // sample loss before refinement, then after each accepted refit
};

/// Distils the frozen surrogate encoder into a factorizer. Single-threaded,
/// bit-reproducible for a fixed seed. Throws apex::Error on non-finite loss
/// or when the surrogate's embedding dimension differs from the config.
Factorizer train_factorizer(const CslLibrary& library, const SurrogateModel& surrogate,
                            const FactorizerConfig& config, const FeatureConfig& synthon_features,
                            const FactorizerTrainConfig& train, FactorizerTrainReport* report = nullptr);

/// Mean squared error ||g(phi(chi)) - g_hat(chi)||^2 over the given products.
double reconstruction_loss(const Factorizer& factorizer, const SurrogateModel& surrogate,
                           const CslLibrary& library, std::span<const MultiIndex> products);

struct GapStats {
  double mean = 0.0;  // of ||g - g_hat||_2
  double p95 = 0.0;
  double max = 0.0;
  double embedding_rms = 0.0;  // sqrt(mean ||g||^2)
  std::size_t samples = 0;
};

GapStats factorization_gap(const Factorizer& factorizer, const SurrogateModel& surrogate,
                           const CslLibrary& library, std::size_t sample_size, std::uint64_t seed);

std::string factorizer_to_json(const Factorizer& factorizer);
Factorizer factorizer_from_json(std::string_view text);
void save_factorizer(const Factorizer& factorizer, const std::string& path);
Factorizer load_factorizer(const std::string& path);

// Binary cache export, little-endian:
//   "APEXHCH1" | u32 version | u64 fingerprint | u32 d | u64 rows
//   rows x (u32 rgroup, u32 synthon) | rows x d float32, row-major
void write_cache(std::ostream& out, const HierarchyCache& cache, const CslLibrary& library);
void save_cache(const HierarchyCache& cache, const CslLibrary& library, const std::string& path);

}  // namespace apex
