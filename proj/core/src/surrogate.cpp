#include "apex/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

#include <json.hpp>

#include "apex/error.hpp"
#include "nn_json.hpp"

namespace apex {

namespace {

nn::MlpSpec encoder_spec(const SurrogateConfig& config, std::size_t input_dim) {
  nn::MlpSpec spec;
  spec.input = input_dim;
  spec.output = config.embedding_dim;
  spec.activation = config.activation;
  if (config.kind == EncoderKind::linear) {
    spec.hidden = {};
    spec.output_bias = false;
  } else {
    spec.hidden = config.hidden;
  }
  return spec;
}

void check_config(const SurrogateConfig& config, const std::vector<std::string>& tasks) {
  if (config.embedding_dim == 0) throw Error("embedding dimension must be positive");
  if (tasks.empty()) throw Error("surrogate needs at least one task");
}

}  // namespace

SurrogateModel SurrogateModel::zeros(const SurrogateConfig& config, FeatureConfig features,
                                     std::vector<std::string> tasks) {
  check_config(config, tasks);
  SurrogateModel m;
  m.config_ = config;
  m.features_ = features;
  m.tasks_ = std::move(tasks);
  m.encoder_ = nn::Mlp::zeros(encoder_spec(config, features.product_dim()));
  const auto n_tasks = static_cast<Eigen::Index>(m.tasks_.size());
  m.head_weights = Eigen::MatrixXd::Zero(n_tasks, static_cast<Eigen::Index>(config.embedding_dim));
  m.head_bias = Eigen::MatrixXd::Zero(n_tasks, 1);
  m.target_mean.assign(m.tasks_.size(), 0.0);
  m.target_scale.assign(m.tasks_.size(), 1.0);
  return m;
}

SurrogateModel::SurrogateModel(const SurrogateConfig& config, FeatureConfig features,
                               std::vector<std::string> tasks, std::uint64_t seed)
    : SurrogateModel(zeros(config, features, std::move(tasks))) {
  std::mt19937_64 rng(seed);
  encoder_ = nn::Mlp(encoder_spec(config, features.product_dim()), rng);
}

std::size_t SurrogateModel::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i] == name) return i;
  }
  throw Error("surrogate has no task '" + std::string(name) + "'");
}

Eigen::MatrixXd SurrogateModel::encode_batch(const Eigen::MatrixXd& features) const {
  if (features.rows() != static_cast<Eigen::Index>(input_dim())) {
    throw Error("feature dimension " + std::to_string(features.rows()) +
                " does not match surrogate input " + std::to_string(input_dim()));
  }
  return encoder_.forward(features);
}

Eigen::VectorXd SurrogateModel::encode(const FeatureVector& features) const {
  return encode_batch(features).col(0);
}

double SurrogateModel::predict(const FeatureVector& features, std::size_t task) const {
  if (task >= tasks_.size()) throw Error("task index out of range");
  const Eigen::VectorXd g = encode(features);
  return head_weights.row(static_cast<Eigen::Index>(task)).dot(g) +
         head_bias(static_cast<Eigen::Index>(task), 0);
}

void SurrogateModel::collect(nn::ParamList& out) {
  encoder_.collect(out);
  out.push_back(&head_weights);
  out.push_back(&head_bias);
}

void SurrogateModel::collect(nn::ConstParamList& out) const {
  encoder_.collect(out);
  out.push_back(&head_weights);
  out.push_back(&head_bias);
}

std::uint64_t SurrogateModel::checksum() const {
  nn::ConstParamList params;
  collect(params);
  return nn::checksum(params);
}

Eigen::VectorXd encode(const SurrogateModel& model, const FeatureVector& features) {
  return model.encode(features);
}

double predict(const SurrogateModel& model, const FeatureVector& features, std::string_view task) {
  return model.predict(features, task);
}

double surrogate_objective(const SurrogateModel& model, const SurrogateBatch& batch,
                           SurrogateModel* grad) {
  const auto n_tasks = static_cast<Eigen::Index>(model.task_count());
  if (batch.targets.rows() != n_tasks || batch.targets.cols() != batch.features.cols()) {
    throw Error("surrogate batch has inconsistent target shape");
  }
  nn::MlpTape tape;
  const Eigen::MatrixXd embedding = model.encoder().forward(batch.features, tape);
  Eigen::MatrixXd noisy = embedding;
  if (batch.noise.size() > 0) noisy += batch.noise;
  Eigen::MatrixXd pred = model.head_weights * noisy;
  pred.colwise() += model.head_bias.col(0);

  Eigen::MatrixXd d_pred = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n_tasks; ++i) {
    std::size_t count = 0;
    for (Eigen::Index b = 0; b < pred.cols(); ++b) {
      if (!std::isnan(batch.targets(i, b))) ++count;
    }
    if (count == 0) continue;
    const double inv = 1.0 / static_cast<double>(count);
    for (Eigen::Index b = 0; b < pred.cols(); ++b) {
      const double y = batch.targets(i, b);
      if (std::isnan(y)) continue;
      const double r = pred(i, b) - y;
      loss += r * r * inv;
      d_pred(i, b) = 2.0 * r * inv;
    }
  }
  if (grad) {
    grad->head_weights.noalias() += d_pred * noisy.transpose();
    grad->head_bias.col(0) += d_pred.rowwise().sum();
    const Eigen::MatrixXd d_embedding = model.head_weights.transpose() * d_pred;
    model.encoder().backward(tape, d_embedding, grad->encoder(), nullptr);
  }
  return loss;
}

namespace {

struct Examples {
  Eigen::MatrixXd features;  // input x N
  Eigen::MatrixXd targets;   // tasks x N (raw units, NaN = missing)
};

Examples build_examples(const LabeledDataset& dataset, const CslLibrary& library,
                        const FeatureTable& table, const std::vector<std::string>& tasks) {
  std::unordered_map<std::string, std::size_t> task_ids;
  for (std::size_t i = 0; i < tasks.size(); ++i) task_ids[tasks[i]] = i;
  std::unordered_map<std::uint64_t, std::size_t> example_of;
  std::vector<const MultiIndex*> chis;
  std::vector<std::pair<std::size_t, std::size_t>> cells;  // (example, row)
  for (std::size_t row = 0; row < dataset.rows.size(); ++row) {
    const auto& r = dataset.rows[row];
    const auto g = library.encode_index(r.chi).value;
    auto [it, inserted] = example_of.try_emplace(g, chis.size());
    if (inserted) chis.push_back(&r.chi);
    cells.emplace_back(it->second, row);
  }
  Examples ex;
  const auto n = static_cast<Eigen::Index>(chis.size());
  ex.features.resize(static_cast<Eigen::Index>(table.product_dim()), n);
  for (Eigen::Index e = 0; e < n; ++e) table.product_features(*chis[e], ex.features.col(e));
  ex.targets = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(tasks.size()), n,
                                         std::numeric_limits<double>::quiet_NaN());
  for (const auto& [e, row] : cells) {
    const auto& r = dataset.rows[row];
    ex.targets(static_cast<Eigen::Index>(task_ids.at(r.task)), static_cast<Eigen::Index>(e)) =
        r.value;
  }
  return ex;
}

SurrogateBatch gather(const Examples& ex, const std::vector<std::size_t>& ids, std::size_t begin,
                      std::size_t end, std::size_t draws) {
  const auto b = static_cast<Eigen::Index>((end - begin) * draws);
  SurrogateBatch batch;
  batch.features.resize(ex.features.rows(), b);
  batch.targets.resize(ex.targets.rows(), b);
  Eigen::Index col = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    for (std::size_t k = begin; k < end; ++k, ++col) {
      batch.features.col(col) = ex.features.col(static_cast<Eigen::Index>(ids[k]));
      batch.targets.col(col) = ex.targets.col(static_cast<Eigen::Index>(ids[k]));
    }
  }
  return batch;
}

}  // namespace

SurrogateModel train_surrogate(const LabeledDataset& dataset, const CslLibrary& library,
                               const SurrogateConfig& model_config, const FeatureConfig& features,
                               const TrainConfig& config, TrainReport* report) {
  if (config.epochs == 0 || config.batch_size == 0) {
    throw Error("epochs and batch size must be positive");
  }
  if (!(config.validation_fraction > 0.0 && config.validation_fraction < 1.0)) {
    throw Error("validation fraction must lie in (0, 1)");
  }
  if (config.noise.draws == 0) throw Error("noise draws must be positive");
  const auto tasks = dataset.task_names();
  if (tasks.empty()) throw Error("labeled dataset is empty");

  const FeatureTable table(library, features);
  Examples ex = build_examples(dataset, library, table, tasks);
  const auto n_examples = static_cast<std::size_t>(ex.features.cols());

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction *
                                                   static_cast<double>(n_examples)));
  std::vector<std::size_t> train_ids, val_ids;
  if (n_val == 0 || n_val >= n_examples) {
    train_ids = order;
    val_ids = order;
  } else {
    val_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }

  // Standardise targets with training-split statistics.
  std::vector<double> mean(tasks.size(), 0.0), scale(tasks.size(), 1.0);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (auto e : train_ids) {
      const double y = ex.targets(row, static_cast<Eigen::Index>(e));
      if (std::isnan(y)) continue;
      sum += y;
      ++count;
    }
    if (count == 0) throw Error("task '" + tasks[i] + "' has no training labels");
    mean[i] = sum / static_cast<double>(count);
    for (auto e : train_ids) {
      const double y = ex.targets(row, static_cast<Eigen::Index>(e));
      if (!std::isnan(y)) sq += (y - mean[i]) * (y - mean[i]);
    }
    const double sd = std::sqrt(sq / static_cast<double>(count));
    scale[i] = sd > 1e-12 ? sd : 1.0;
    ex.targets.row(row) = ((ex.targets.row(row).array() - mean[i]) / scale[i]).matrix();
  }

  SurrogateModel model(model_config, features, tasks, config.seed);
  {
    const double init = 1.0 / std::sqrt(static_cast<double>(model_config.embedding_dim));
    std::normal_distribution<double> head_init(0.0, init);
    for (Eigen::Index j = 0; j < model.head_weights.cols(); ++j) {
      for (Eigen::Index i = 0; i < model.head_weights.rows(); ++i) {
        model.head_weights(i, j) = head_init(rng);
      }
    }
  }

  double sigma = 0.0;
  if (config.noise.sigma) {
    sigma = *config.noise.sigma;
  } else {
    const auto warm = gather(ex, train_ids, 0, train_ids.size(), 1);
    const Eigen::MatrixXd g = model.encoder().forward(warm.features);
    const double rms = g.size() > 0 ? std::sqrt(g.squaredNorm() / static_cast<double>(g.size())) : 0.0;
    sigma = config.noise.relative_scale * rms;
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error("noise sigma must be finite and >= 0");

  nn::ParamList params;
  model.collect(params);
  nn::ConstParamList const_params(params.begin(), params.end());
  SurrogateModel grad = SurrogateModel::zeros(model_config, features, tasks);
  nn::ParamList grad_params;
  grad.collect(grad_params);
  nn::ConstParamList const_grads(grad_params.begin(), grad_params.end());
  nn::Adam adam(const_params);

  const std::size_t batches_per_epoch =
      (train_ids.size() + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = batches_per_epoch * config.epochs;
  std::uint64_t step = 0;
  std::normal_distribution<double> unit_normal(0.0, 1.0);

  const auto val_batch = gather(ex, val_ids, 0, val_ids.size(), 1);
  SurrogateModel best = model;
  double best_loss = std::numeric_limits<double>::infinity();
  TrainReport local;
  local.sigma = sigma;
  local.train_examples = train_ids.size();
  local.validation_examples = val_ids.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(train_ids.begin(), train_ids.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < train_ids.size(); begin += config.batch_size) {
      const auto end = std::min(begin + config.batch_size, train_ids.size());
      auto batch = gather(ex, train_ids, begin, end, config.noise.draws);
      batch.noise.resize(static_cast<Eigen::Index>(model_config.embedding_dim), batch.features.cols());
      if (sigma > 0.0) {
        for (Eigen::Index j = 0; j < batch.noise.cols(); ++j) {
          for (Eigen::Index i = 0; i < batch.noise.rows(); ++i) {
            batch.noise(i, j) = sigma * unit_normal(rng);
          }
        }
      } else {
        batch.noise.setZero();
      }
      for (auto* g : grad_params) g->setZero();
      const double loss = surrogate_objective(model, batch, &grad);
      if (!std::isfinite(loss)) {
        throw Error("surrogate training diverged: non-finite loss at epoch " +
                    std::to_string(epoch) + ", step " + std::to_string(step));
      }
      epoch_loss += loss * static_cast<double>(end - begin);
      adam.step(params, const_grads,
                nn::cosine_schedule(config.learning_rate, config.final_learning_rate, step,
                                    total_steps));
      ++step;
    }
    const double val_loss = surrogate_objective(model, val_batch, nullptr);
    if (!std::isfinite(val_loss)) {
      throw Error("surrogate training diverged: non-finite validation loss at epoch " +
                  std::to_string(epoch));
    }
    local.train_loss.push_back(epoch_loss / static_cast<double>(train_ids.size()));
    local.validation_loss.push_back(val_loss);
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = model;
      local.best_epoch = epoch;
    }
  }
  local.best_validation_loss = best_loss;

  // Fold the standardisation into the heads.
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    best.head_weights.row(row) *= scale[i];
    best.head_bias(row, 0) = best.head_bias(row, 0) * scale[i] + mean[i];
  }
  best.target_mean = mean;
  best.target_scale = scale;
  if (report) *report = std::move(local);
  return best;
}

std::optional<double> r_squared(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size() || truth.empty()) return std::nullopt;
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
  }
  if (ss_tot <= 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

std::vector<R2Entry> evaluate_r2(const SurrogateModel& model, const LabeledDataset& dataset,
                                 const CslLibrary& library) {
  if (dataset.rows.empty()) throw Error("cannot evaluate R^2 on an empty dataset");
  const FeatureTable table(library, model.feature_config());
  std::vector<R2Entry> out;
  for (const auto& name : dataset.task_names()) {
    const auto task = model.task_index(name);
    std::vector<double> truth, pred;
    for (const auto& row : dataset.rows) {
      if (row.task != name) continue;
      truth.push_back(row.value);
      pred.push_back(model.predict(table.product_features(row.chi), task));
    }
    out.push_back({name, truth.size(), r_squared(truth, pred)});
  }
  return out;
}

std::string surrogate_to_json(const SurrogateModel& model) {
  nlohmann::ordered_json j;
  j["format"] = "apex-surrogate";
  j["version"] = 1;
  const auto& c = model.config();
  j["config"] = {{"embedding_dim", c.embedding_dim},
                 {"hidden", c.hidden},
                 {"activation", nn::to_string(c.activation)},
                 {"kind", c.kind == EncoderKind::linear ? "linear" : "mlp"}};
  const auto& f = model.feature_config();
  j["features"] = {{"dim", f.dim},
                   {"cross_terms", f.cross_terms},
                   {"max_ngram", f.max_ngram},
                   {"scale", f.scale},
                   {"seed", f.seed}};
  j["tasks"] = model.tasks();
  j["target_mean"] = model.target_mean;
  j["target_scale"] = model.target_scale;
  j["encoder"] = nn::mlp_to_json(model.encoder());
  j["head_weights"] = nn::matrix_to_json(model.head_weights);
  j["head_bias"] = nn::matrix_to_json(model.head_bias);
  return j.dump() + "\n";
}

SurrogateModel surrogate_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", std::string{}) != "apex-surrogate") {
      throw Error("not an apex-surrogate checkpoint");
    }
    if (j.value("version", 0) != 1) throw Error("unsupported surrogate checkpoint version");
    SurrogateConfig c;
    const auto& jc = j.at("config");
    c.embedding_dim = jc.at("embedding_dim").get<std::size_t>();
    c.hidden = jc.at("hidden").get<std::vector<std::size_t>>();
    c.activation = nn::activation_from_string(jc.at("activation").get<std::string>());
    c.kind = jc.at("kind").get<std::string>() == "linear" ? EncoderKind::linear : EncoderKind::mlp;
    FeatureConfig f;
    const auto& jf = j.at("features");
    f.dim = jf.at("dim").get<std::size_t>();
    f.cross_terms = jf.at("cross_terms").get<std::size_t>();
    f.max_ngram = jf.at("max_ngram").get<std::size_t>();
    f.scale = jf.at("scale").get<double>();
    f.seed = jf.at("seed").get<std::uint64_t>();
    auto model = SurrogateModel::zeros(c, f, j.at("tasks").get<std::vector<std::string>>());
    model.encoder() = nn::mlp_from_json(j.at("encoder"));
    if (model.encoder().input_dim() != f.product_dim() ||
        model.encoder().output_dim() != c.embedding_dim) {
      throw Error("surrogate encoder shape does not match its config");
    }
    model.head_weights = nn::matrix_from_json(j.at("head_weights"));
    model.head_bias = nn::matrix_from_json(j.at("head_bias"));
    if (model.head_weights.rows() != static_cast<Eigen::Index>(model.task_count()) ||
        model.head_weights.cols() != static_cast<Eigen::Index>(c.embedding_dim) ||
        model.head_bias.rows() != model.head_weights.rows() || model.head_bias.cols() != 1) {
      throw Error("surrogate head shape mismatch");
    }
    model.target_mean = j.at("target_mean").get<std::vector<double>>();
    model.target_scale = j.at("target_scale").get<std::vector<double>>();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed surrogate checkpoint: ") + e.what());
  }
}

void save_surrogate(const SurrogateModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << surrogate_to_json(model);
  if (!out) throw Error("failed writing " + path);
}

SurrogateModel load_surrogate(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open surrogate checkpoint " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return surrogate_from_json(text);
}

}  // namespace apex
