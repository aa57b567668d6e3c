#include "apex/nn.hpp"

#include <cmath>
#include <numbers>

#include "apex/error.hpp"
#include "apex/hash.hpp"

namespace apex::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::silu: return "silu";
  }
  return "identity";
}

Activation activation_from_string(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "tanh") return Activation::tanh;
  if (name == "silu") return Activation::silu;
  throw Error("unknown activation '" + std::string(name) + "'");
}

Eigen::MatrixXd activate(Activation a, const Eigen::MatrixXd& z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::tanh: return z.array().tanh().matrix();
    case Activation::silu:
      return (z.array() / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

Eigen::MatrixXd activation_slope(Activation a, const Eigen::MatrixXd& z) {
  switch (a) {
    case Activation::identity: return Eigen::MatrixXd::Ones(z.rows(), z.cols());
    case Activation::tanh: return (1.0 - z.array().tanh().square()).matrix();
    case Activation::silu: {
      const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
      return (sig * (1.0 + z.array() * (1.0 - sig))).matrix();
    }
  }
  return Eigen::MatrixXd::Ones(z.rows(), z.cols());
}

namespace {

std::vector<std::size_t> layer_dims(const MlpSpec& spec) {
  std::vector<std::size_t> dims{spec.input};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.output);
  return dims;
}

}  // namespace

Mlp Mlp::zeros(const MlpSpec& spec) {
  Mlp m;
  m.spec_ = spec;
  const auto dims = layer_dims(spec);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const auto rows = static_cast<Eigen::Index>(dims[i + 1]);
    const auto cols = static_cast<Eigen::Index>(dims[i]);
    m.weights.push_back(Eigen::MatrixXd::Zero(rows, cols));
    const bool is_output = (i + 2 == dims.size());
    if (!is_output || spec.output_bias) {
      m.biases.push_back(Eigen::MatrixXd::Zero(rows, 1));
    } else {
      m.biases.emplace_back();
    }
  }
  if (spec.linear_skip) {
    m.skip = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(spec.output),
                                   static_cast<Eigen::Index>(spec.input));
  }
  return m;
}

Mlp::Mlp(const MlpSpec& spec, std::mt19937_64& rng) : Mlp(zeros(spec)) {
  auto glorot = [&rng](Eigen::MatrixXd& w) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
  };
  for (auto& w : weights) glorot(w);
  if (skip.size() > 0) glorot(skip);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  MlpTape tape;
  return forward(x, tape);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpTape& tape) const {
  if (x.rows() != static_cast<Eigen::Index>(spec_.input)) {
    throw Error("network input has dimension " + std::to_string(x.rows()) + ", expected " +
                std::to_string(spec_.input));
  }
  tape.input = x;
  tape.pre.clear();
  tape.post.clear();
  const Eigen::MatrixXd* current = &tape.input;
  const std::size_t n_layers = weights.size();
  for (std::size_t i = 0; i + 1 < n_layers; ++i) {
    Eigen::MatrixXd z = weights[i] * *current;
    z.colwise() += biases[i].col(0);
    tape.post.push_back(activate(spec_.activation, z));
    tape.pre.push_back(std::move(z));
    current = &tape.post.back();
  }
  Eigen::MatrixXd out = weights.back() * *current;
  if (biases.back().size() > 0) out.colwise() += biases.back().col(0);
  if (skip.size() > 0) out.noalias() += skip * tape.input;
  return out;
}

void Mlp::backward(const MlpTape& tape, const Eigen::MatrixXd& d_out, Mlp& grad,
                   Eigen::MatrixXd* d_input) const {
  const std::size_t n_layers = weights.size();
  Eigen::MatrixXd delta = d_out;
  Eigen::MatrixXd d_x;
  if (skip.size() > 0) {
    grad.skip.noalias() += d_out * tape.input.transpose();
    if (d_input) d_x = skip.transpose() * d_out;
  }
  for (std::size_t i = n_layers; i-- > 0;) {
    const Eigen::MatrixXd& layer_in = (i == 0) ? tape.input : tape.post[i - 1];
    grad.weights[i].noalias() += delta * layer_in.transpose();
    if (biases[i].size() > 0) grad.biases[i].col(0) += delta.rowwise().sum();
    if (i == 0) {
      if (d_input) {
        if (d_x.size() > 0) {
          d_x.noalias() += weights[0].transpose() * delta;
        } else {
          d_x = weights[0].transpose() * delta;
        }
      }
    } else {
      Eigen::MatrixXd back = weights[i].transpose() * delta;
      delta = back.cwiseProduct(activation_slope(spec_.activation, tape.pre[i - 1]));
    }
  }
  if (d_input) *d_input = std::move(d_x);
}

void Mlp::collect(ParamList& out) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    if (biases[i].size() > 0) out.push_back(&biases[i]);
  }
  if (skip.size() > 0) out.push_back(&skip);
}

void Mlp::collect(ConstParamList& out) const {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    if (biases[i].size() > 0) out.push_back(&biases[i]);
  }
  if (skip.size() > 0) out.push_back(&skip);
}

void Mlp::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
  skip.setZero();
}

std::size_t parameter_count(const ConstParamList& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += static_cast<std::size_t>(p->size());
  return n;
}

std::vector<double> flatten(const ConstParamList& params) {
  std::vector<double> out;
  out.reserve(parameter_count(params));
  for (const auto* p : params) out.insert(out.end(), p->data(), p->data() + p->size());
  return out;
}

void unflatten(const std::vector<double>& values, const ParamList& params) {
  std::size_t offset = 0;
  for (auto* p : params) {
    const auto n = static_cast<std::size_t>(p->size());
    if (offset + n > values.size()) throw Error("parameter vector too short");
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(offset),
              values.begin() + static_cast<std::ptrdiff_t>(offset + n), p->data());
    offset += n;
  }
  if (offset != values.size()) throw Error("parameter vector too long");
}

std::uint64_t checksum(const ConstParamList& params) {
  std::uint64_t h = hashing::kFnvOffset;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const char*>(p->data());
    h = hashing::fnv1a(std::string_view(bytes, static_cast<std::size_t>(p->size()) * sizeof(double)), h);
  }
  return h;
}

Adam::Adam(const ConstParamList& params, AdamConfig config) : config_(config) {
  for (const auto* p : params) {
    m_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const ParamList& params, const ConstParamList& grads, double learning_rate) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * *grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i]->cwiseAbs2();
    params[i]->array() -= learning_rate * (m_[i].array() / c1) /
                          ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

double cosine_schedule(double start, double end, std::uint64_t step, std::uint64_t total) {
  if (total <= 1) return start;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace apex::nn
