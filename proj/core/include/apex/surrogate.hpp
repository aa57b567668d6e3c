#pragma once

// Multi-task surrogate: an encoder mapping product features to a
// d-dimensional embedding, and one linear head (w_i, b_i) per task. Training
// perturbs the embedding with isotropic Gaussian noise before the heads.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apex/csl.hpp"
#include "apex/nn.hpp"
#include "apex/props.hpp"

namespace apex {

enum class EncoderKind {
  mlp,     // hidden layers with a smooth activation
  linear,  // embedding = A * features, no bias
};

struct SurrogateConfig {
  std::size_t embedding_dim = 64;
  std::vector<std::size_t> hidden = {128, 128};
  nn::Activation activation = nn::Activation::silu;
  EncoderKind kind = EncoderKind::mlp;
};

class SurrogateModel {
 public:
  SurrogateModel() = default;
  /// Randomly initialised encoder, zero heads.
  SurrogateModel(const SurrogateConfig& config, FeatureConfig features,
                 std::vector<std::string> tasks, std::uint64_t seed);

  static SurrogateModel zeros(const SurrogateConfig& config, FeatureConfig features,
                              std::vector<std::string> tasks);

  const SurrogateConfig& config() const { return config_; }
  const FeatureConfig& feature_config() const { return features_; }
  std::size_t input_dim() const { return features_.product_dim(); }
  std::size_t embedding_dim() const { return config_.embedding_dim; }

  const std::vector<std::string>& tasks() const { return tasks_; }
  std::size_t task_count() const { return tasks_.size(); }
  /// Throws apex::Error for unknown names.
  std::size_t task_index(std::string_view name) const;

  /// Throws apex::Error on a feature dimension mismatch.
  Eigen::VectorXd encode(const FeatureVector& features) const;
  Eigen::MatrixXd encode_batch(const Eigen::MatrixXd& features) const;

  /// w_i . encode(features) + b_i
  double predict(const FeatureVector& features, std::size_t task) const;
  double predict(const FeatureVector& features, std::string_view task) const {
    return predict(features, task_index(task));
  }

  nn::Mlp& encoder() { return encoder_; }
  const nn::Mlp& encoder() const { return encoder_; }

  // Row i is w_i; column vector of biases b_i.
  Eigen::MatrixXd head_weights;
  Eigen::MatrixXd head_bias;

  // Per-task target standardisation used during training (informational
  // after export; the heads above already predict in target units).
  std::vector<double> target_mean;
  std::vector<double> target_scale;

  void collect(nn::ParamList& out);
  void collect(nn::ConstParamList& out) const;
  std::uint64_t checksum() const;

 private:
  SurrogateConfig config_;
  FeatureConfig features_;
  std::vector<std::string> tasks_;
  nn::Mlp encoder_;
};

Eigen::VectorXd encode(const SurrogateModel& model, const FeatureVector& features);
double predict(const SurrogateModel& model, const FeatureVector& features, std::string_view task);

struct NoiseConfig {
  /// Absolute per-coordinate standard deviation. When unset, sigma is
  /// relative_scale times the per-coordinate RMS of the initial embeddings.
  std::optional<double> sigma;
  double relative_scale = 0.1;
  std::size_t draws = 1;  // noise draws per example per step
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  double learning_rate = 2e-3;
  double final_learning_rate = 2e-5;
  std::uint64_t seed = 0;
  NoiseConfig noise;
  double validation_fraction = 0.1;
};

/// One minibatch in standardised target space. Missing labels are NaN.
struct SurrogateBatch {
  Eigen::MatrixXd features;  // input_dim x B
  Eigen::MatrixXd targets;   // tasks x B
  Eigen::MatrixXd noise;     // embedding_dim x B (zero matrix for noise-free)
};

/// Noisy multi-task objective: sum over tasks of the mean squared error over
/// that task's labelled examples, with `noise` added to the embedding before
/// the heads. Accumulates parameter gradients into `grad` when non-null.
double surrogate_objective(const SurrogateModel& model, const SurrogateBatch& batch,
                           SurrogateModel* grad);

struct TrainReport {
  double sigma = 0.0;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
  std::vector<double> train_loss;       // per epoch, noisy
  std::vector<double> validation_loss;  // per epoch, noise-free
  std::size_t train_examples = 0;
  std::size_t validation_examples = 0;
};

/// Trains on every task that appears in `dataset` (first-appearance order).
/// Single-threaded and bit-reproducible for a fixed seed. Throws apex::Error
/// if the loss becomes non-finite.
SurrogateModel train_surrogate(const LabeledDataset& dataset, const CslLibrary& library,
                               const SurrogateConfig& model_config,
                               const FeatureConfig& features, const TrainConfig& config,
                               TrainReport* report = nullptr);

struct R2Entry {
  std::string task;
  std::size_t count = 0;
  std::optional<double> r2;  // empty when the targets have zero variance
};

std::optional<double> r_squared(std::span<const double> truth, std::span<const double> predicted);

std::vector<R2Entry> evaluate_r2(const SurrogateModel& model, const LabeledDataset& dataset,
                                 const CslLibrary& library);

std::string surrogate_to_json(const SurrogateModel& model);
SurrogateModel surrogate_from_json(std::string_view text);
void save_surrogate(const SurrogateModel& model, const std::string& path);
SurrogateModel load_surrogate(const std::string& path);

}  // namespace apex
