#pragma once

// Minimal dense network toolkit shared by the surrogate and the factorizer.
// Batches are column-major: one example per column. Gradients are held in a
// zero-initialised copy of the module itself, so parameter and gradient lists
// line up one-to-one through collect().

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace apex::nn {

enum class Activation { identity, tanh, silu };

std::string to_string(Activation a);
Activation activation_from_string(std::string_view name);

using ParamList = std::vector<Eigen::MatrixXd*>;
using ConstParamList = std::vector<const Eigen::MatrixXd*>;

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::size_t output = 0;
  Activation activation = Activation::silu;
  bool output_bias = true;
  bool linear_skip = false;  // adds a bias-free linear map input -> output
};

/// Activations recorded by a forward pass, consumed by backward().
struct MlpTape {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;   // pre-activation of each hidden layer
  std::vector<Eigen::MatrixXd> post;  // post-activation of each hidden layer
};

class Mlp {
 public:
  Mlp() = default;
  /// Glorot-uniform weights, zero biases.
  Mlp(const MlpSpec& spec, std::mt19937_64& rng);
  /// All-zero parameters with the given shape.
  static Mlp zeros(const MlpSpec& spec);

  const MlpSpec& spec() const { return spec_; }
  std::size_t input_dim() const { return spec_.input; }
  std::size_t output_dim() const { return spec_.output; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpTape& tape) const;

  /// Accumulates (+=) parameter gradients into `grad` and, if requested,
  /// writes the input gradient.
  void backward(const MlpTape& tape, const Eigen::MatrixXd& d_out, Mlp& grad,
                Eigen::MatrixXd* d_input) const;

  void collect(ParamList& out);
  void collect(ConstParamList& out) const;
  void set_zero();

  // Layer i maps layer i-1 (or the input) to hidden[i] (or the output).
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::MatrixXd> biases;  // column vectors; empty matrix if disabled
  Eigen::MatrixXd skip;                 // output x input, empty if disabled

 private:
  MlpSpec spec_;
};

Eigen::MatrixXd activate(Activation a, const Eigen::MatrixXd& z);
/// d activation / d z evaluated at z.
Eigen::MatrixXd activation_slope(Activation a, const Eigen::MatrixXd& z);

std::size_t parameter_count(const ConstParamList& params);
std::vector<double> flatten(const ConstParamList& params);
void unflatten(const std::vector<double>& values, const ParamList& params);
/// FNV hash over the raw parameter bytes.
std::uint64_t checksum(const ConstParamList& params);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ConstParamList& params, AdamConfig config = {});
  void step(const ParamList& params, const ConstParamList& grads, double learning_rate);

 private:
  AdamConfig config_;
  std::vector<Eigen::MatrixXd> m_;
  std::vector<Eigen::MatrixXd> v_;
  std::uint64_t t_ = 0;
};

/// Cosine decay from `start` to `end` over `total` steps.
double cosine_schedule(double start, double end, std::uint64_t step, std::uint64_t total);

}  // namespace apex::nn
