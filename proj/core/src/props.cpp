#include "apex/props.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "apex/error.hpp"
#include "apex/hash.hpp"
#include "text_util.hpp"

namespace apex {

FeatureVector synthon_features(std::string_view token, const FeatureConfig& config) {
  if (token.empty()) throw Error("synthon token must be non-empty");
  if (config.dim == 0) throw Error("feature dimension must be positive");
  FeatureVector out = FeatureVector::Zero(static_cast<Eigen::Index>(config.dim));
  for (std::size_t n = 1; n <= config.max_ngram && n <= token.size(); ++n) {
    // The n-gram length is folded into the hash so "AB" as a 2-gram and the
    // 1-grams "A","B" never share a key.
    const std::uint64_t len_key = hashing::combine(config.seed, n);
    for (std::size_t i = 0; i + n <= token.size(); ++i) {
      const auto h = hashing::mix64(hashing::fnv1a(token.substr(i, n), len_key));
      out[static_cast<Eigen::Index>(h % config.dim)] += 1.0;
    }
  }
  out *= config.scale;
  return out;
}

FeatureTable::FeatureTable(const CslLibrary& library, FeatureConfig config)
    : config_(config) {
  const auto p = static_cast<Eigen::Index>(config_.dim);
  const auto q = static_cast<Eigen::Index>(config_.cross_terms);
  synthon_features_.resize(p, static_cast<Eigen::Index>(library.synthon_count()));
  for (const auto& s : library.synthons()) {
    synthon_features_.col(s.id) = synthon_features(s.token, config_);
  }
  synthon_norms_ = synthon_features_.colwise().norm().transpose();
  projection_.resize(q, p);
  const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(p, 1)));
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto key = hashing::combine(hashing::combine(config_.seed ^ 0xc405ULL, i), j);
      projection_(i, j) = hashing::to_normal(key) * inv_sqrt_p;
    }
  }
}

void FeatureTable::product_features(const MultiIndex& chi, Eigen::Ref<Eigen::VectorXd> out) const {
  const auto p = static_cast<Eigen::Index>(config_.dim);
  out.head(p).setZero();
  Eigen::Index best = -1, second = -1;
  for (const auto& a : chi.assignment) {
    const auto s = static_cast<Eigen::Index>(a.synthon);
    out.head(p) += synthon_features_.col(s);
    if (best < 0 || synthon_norms_[s] > synthon_norms_[best]) {
      second = best;
      best = s;
    } else if (second < 0 || synthon_norms_[s] > synthon_norms_[second]) {
      second = s;
    }
  }
  if (config_.cross_terms == 0) return;
  if (best < 0) {
    out.tail(static_cast<Eigen::Index>(config_.cross_terms)).setZero();
    return;
  }
  if (second < 0) second = best;
  const Eigen::VectorXd cross =
      synthon_features_.col(best).cwiseProduct(synthon_features_.col(second));
  out.tail(static_cast<Eigen::Index>(config_.cross_terms)) = projection_ * cross;
}

FeatureVector FeatureTable::product_features(const MultiIndex& chi) const {
  FeatureVector out(static_cast<Eigen::Index>(product_dim()));
  product_features(chi, out);
  return out;
}

FeatureVector product_features(const CslLibrary& library, const MultiIndex& chi,
                               const FeatureConfig& config) {
  return FeatureTable(library, config).product_features(chi);
}

// ---------------------------------------------------------------------------
// Oracle configuration

std::string TaskDef::mode() const {
  std::string m = "additive";
  if (nonlinear) m += "+nonlinear";
  if (pairwise) m += "+pairwise";
  return m;
}

void parse_task_mode(std::string_view mode, TaskDef& task) {
  const auto parts = text::split(mode, '+');
  if (parts.empty() || parts[0] != "additive") {
    throw Error("task mode must start with 'additive': " + std::string(mode));
  }
  task.nonlinear = false;
  task.pairwise = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i] == "nonlinear" && !task.nonlinear) {
      task.nonlinear = true;
    } else if (parts[i] == "pairwise" && !task.pairwise) {
      task.pairwise = true;
    } else {
      throw Error("unknown task mode component '" + std::string(parts[i]) + "'");
    }
  }
}

namespace {

TaskDef property_task(std::string name, double weight_mean, double weight_sd) {
  TaskDef t;
  t.name = std::move(name);
  t.weight_mean = weight_mean;
  t.weight_sd = weight_sd;
  return t;
}

OracleConfig make_default(std::uint64_t seed, bool hard) {
  OracleConfig config;
  config.seed = seed;
  for (int i = 0; i < 5; ++i) {
    TaskDef t;
    t.name = "dock" + std::to_string(i);
    t.weight_mean = -0.33;
    t.weight_sd = 0.5;
    if (hard) {
      t.nonlinear = true;
      t.pairwise = true;
      t.nonlinear_scale = 1.0;
      t.nonlinear_alpha = 0.3;
      t.pairwise_density = 0.1;
      t.pairwise_scale = 0.5;
    }
    config.tasks.push_back(t);
  }
  // Scales put sums over 2-3 synthons in the usual ranges of the descriptors
  // the preset constraint bundles refer to.
  config.tasks.push_back(property_task("mw", 19.0, 15.0));
  config.tasks.push_back(property_task("logp", 0.13, 0.4));
  config.tasks.push_back(property_task("hbd", 0.09, 0.3));
  config.tasks.push_back(property_task("hba", 0.22, 0.5));
  config.tasks.push_back(property_task("rotb", 0.22, 0.6));
  config.tasks.push_back(property_task("tpsa", 3.3, 5.0));
  return config;
}

}  // namespace

OracleConfig default_oracle_config(std::uint64_t seed) { return make_default(seed, true); }
OracleConfig additive_oracle_config(std::uint64_t seed) { return make_default(seed, false); }

std::string oracle_config_to_json(const OracleConfig& config) {
  nlohmann::ordered_json j;
  j["format"] = "apex-oracle";
  j["version"] = 1;
  j["seed"] = config.seed;
  j["features"] = {{"dim", config.features.dim},
                   {"cross_terms", config.features.cross_terms},
                   {"max_ngram", config.features.max_ngram},
                   {"scale", config.features.scale},
                   {"seed", config.features.seed}};
  auto tasks = nlohmann::ordered_json::array();
  for (const auto& t : config.tasks) {
    tasks.push_back({{"name", t.name},
                     {"mode", t.mode()},
                     {"weight_mean", t.weight_mean},
                     {"weight_sd", t.weight_sd},
                     {"offset", t.offset},
                     {"nonlinear_scale", t.nonlinear_scale},
                     {"nonlinear_alpha", t.nonlinear_alpha},
                     {"pairwise_density", t.pairwise_density},
                     {"pairwise_scale", t.pairwise_scale},
                     {"noise", t.noise}});
  }
  j["tasks"] = std::move(tasks);
  return j.dump(2) + "\n";
}

OracleConfig oracle_config_from_json(std::string_view text) {
  OracleConfig config;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", std::string{}) != "apex-oracle") throw Error("not an apex-oracle config");
    if (j.value("version", 0) != 1) throw Error("unsupported oracle config version");
    config.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("features")) {
      const auto& f = j["features"];
      config.features.dim = f.value("dim", config.features.dim);
      config.features.cross_terms = f.value("cross_terms", config.features.cross_terms);
      config.features.max_ngram = f.value("max_ngram", config.features.max_ngram);
      config.features.scale = f.value("scale", config.features.scale);
      config.features.seed = f.value("seed", config.features.seed);
    }
    std::set<std::string> names;
    for (const auto& jt : j.at("tasks")) {
      TaskDef t;
      t.name = jt.at("name").get<std::string>();
      if (!names.insert(t.name).second) throw Error("duplicate task name '" + t.name + "'");
      parse_task_mode(jt.value("mode", std::string("additive")), t);
      t.weight_mean = jt.value("weight_mean", t.weight_mean);
      t.weight_sd = jt.value("weight_sd", t.weight_sd);
      t.offset = jt.value("offset", t.offset);
      t.nonlinear_scale = jt.value("nonlinear_scale", t.nonlinear_scale);
      t.nonlinear_alpha = jt.value("nonlinear_alpha", t.nonlinear_alpha);
      t.pairwise_density = jt.value("pairwise_density", t.pairwise_density);
      t.pairwise_scale = jt.value("pairwise_scale", t.pairwise_scale);
      t.noise = jt.value("noise", t.noise);
      config.tasks.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed oracle config: ") + e.what());
  }
  return config;
}

void save_oracle_config(const OracleConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << oracle_config_to_json(config);
}

OracleConfig load_oracle_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open oracle config " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return oracle_config_from_json(text);
}

// ---------------------------------------------------------------------------
// Oracle

GroundTruthOracle::GroundTruthOracle(OracleConfig config, const CslLibrary& library)
    : config_(std::move(config)) {
  std::set<std::string> names;
  for (const auto& t : config_.tasks) {
    if (!names.insert(t.name).second) throw Error("duplicate task name '" + t.name + "'");
  }
  const FeatureTable features(library, config_.features);
  const auto p = static_cast<Eigen::Index>(config_.features.dim);
  token_hash_.reserve(library.synthon_count());
  for (const auto& s : library.synthons()) token_hash_.push_back(hashing::fnv1a(s.token));

  latents_.resize(config_.tasks.size());
  for (std::size_t i = 0; i < config_.tasks.size(); ++i) {
    const auto& task = config_.tasks[i];
    const auto key = hashing::combine(config_.seed, hashing::fnv1a(task.name));
    task_keys_.push_back(key);
    Eigen::RowVectorXd gamma(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      gamma[j] = task.weight_mean + task.weight_sd * hashing::to_normal(hashing::combine(key, j));
    }
    const Eigen::RowVectorXd latents = gamma * features.synthons();
    latents_[i].assign(latents.data(), latents.data() + latents.size());
  }
}

std::size_t GroundTruthOracle::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < config_.tasks.size(); ++i) {
    if (config_.tasks[i].name == name) return i;
  }
  throw Error("unknown task '" + std::string(name) + "'");
}

std::vector<std::string> GroundTruthOracle::task_names() const {
  std::vector<std::string> out;
  for (const auto& t : config_.tasks) out.push_back(t.name);
  return out;
}

double GroundTruthOracle::evaluate(const MultiIndex& chi, std::size_t task) const {
  if (task >= config_.tasks.size()) throw Error("task index out of range");
  const auto& def = config_.tasks[task];
  const auto& lat = latents_[task];
  double additive = 0.0;
  for (const auto& a : chi.assignment) additive += lat.at(a.synthon);
  double value = additive + def.offset;
  if (def.nonlinear) value += def.nonlinear_scale * std::tanh(def.nonlinear_alpha * additive);
  if (def.pairwise) {
    const auto key = task_keys_[task] ^ 0x9a1b2c3dULL;
    for (std::size_t a = 0; a < chi.assignment.size(); ++a) {
      for (std::size_t b = a + 1; b < chi.assignment.size(); ++b) {
        auto ha = token_hash_[chi.assignment[a].synthon];
        auto hb = token_hash_[chi.assignment[b].synthon];
        if (ha > hb) std::swap(ha, hb);
        const auto pair_key = hashing::combine(hashing::combine(key, ha), hb);
        if (hashing::to_unit(pair_key) < def.pairwise_density) {
          value += def.pairwise_scale * hashing::to_normal(pair_key ^ 0x77ULL);
        }
      }
    }
  }
  if (def.noise != 0.0) {
    auto h = hashing::combine(task_keys_[task] ^ 0x4e015eULL, chi.reaction);
    for (const auto& a : chi.assignment) h = hashing::combine(h, token_hash_[a.synthon]);
    value += def.noise * hashing::to_normal(h);
  }
  return value;
}

double ground_truth(const GroundTruthOracle& oracle, const MultiIndex& chi,
                    std::string_view task) {
  return oracle.evaluate(chi, oracle.task_index(task));
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<std::string> LabeledDataset::task_names() const {
  std::vector<std::string> names;
  std::unordered_set<std::string> seen;
  for (const auto& row : rows) {
    if (seen.insert(row.task).second) names.push_back(row.task);
  }
  return names;
}

std::vector<std::uint64_t> sample_indices(std::uint64_t n, std::uint64_t count,
                                          std::uint64_t seed) {
  std::vector<std::uint64_t> out;
  if (count >= n) {
    out.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  // Floyd's algorithm: exactly `count` distinct draws.
  std::mt19937_64 rng(seed);
  std::unordered_set<std::uint64_t> chosen;
  chosen.reserve(count * 2);
  for (std::uint64_t j = n - count; j < n; ++j) {
    std::uniform_int_distribution<std::uint64_t> dist(0, j);
    const auto t = dist(rng);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  out.assign(chosen.begin(), chosen.end());
  std::sort(out.begin(), out.end());
  return out;
}

LabeledDataset label_library(const GroundTruthOracle& oracle, const CslLibrary& library,
                             std::span<const std::string> tasks, const SampleSpec& sample) {
  std::vector<std::size_t> task_ids;
  for (const auto& name : tasks) task_ids.push_back(oracle.task_index(name));
  const auto n = library.product_count();
  const auto indices = sample.full ? sample_indices(n, n, 0)
                                   : sample_indices(n, sample.size, sample.seed);
  LabeledDataset dataset;
  dataset.rows.reserve(indices.size() * task_ids.size());
  for (const auto g : indices) {
    const auto chi = library.decode_index(GlobalIndex{g});
    for (std::size_t k = 0; k < task_ids.size(); ++k) {
      dataset.rows.push_back({chi, tasks[k], oracle.evaluate(chi, task_ids[k])});
    }
  }
  return dataset;
}

void write_labels(std::ostream& out, const LabeledDataset& dataset) {
  out << "reaction_id\tsynthon_ids\ttask\tvalue\n";
  for (const auto& row : dataset.rows) {
    out << row.chi.reaction << '\t';
    for (std::size_t i = 0; i < row.chi.assignment.size(); ++i) {
      if (i > 0) out << ',';
      out << row.chi.assignment[i].synthon;
    }
    out << '\t' << row.task << '\t' << text::format_double(row.value) << '\n';
  }
}

LabeledDataset read_labels(std::istream& in, const CslLibrary& library) {
  LabeledDataset dataset;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw Error("labels line " + std::to_string(line_no) + ": " + msg);
  };
  if (!std::getline(in, line)) throw Error("labels file is empty (missing header)");
  ++line_no;
  if (text::strip_cr(line) != "reaction_id\tsynthon_ids\ttask\tvalue") {
    fail("unexpected header");
  }
  std::set<std::pair<std::uint64_t, std::string>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = text::strip_cr(line);
    if (view.empty()) continue;
    const auto fields = text::split(view, '\t');
    if (fields.size() != 4) fail("expected 4 tab-separated fields");
    const auto reaction = text::parse_u64(fields[0]);
    if (!reaction || *reaction >= library.reaction_count()) {
      fail("unknown reaction id '" + std::string(fields[0]) + "'");
    }
    const auto& rxn = library.reactions()[*reaction];
    const auto ids = text::split(fields[1], ',');
    if (ids.size() != rxn.rgroups.size()) fail("synthon count does not match reaction");
    MultiIndex chi;
    chi.reaction = static_cast<ReactionId>(*reaction);
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      const auto s = text::parse_u64(ids[pos]);
      const auto rg = rxn.rgroups[pos].id;
      if (!s || *s > UINT32_MAX || !library.position_of(rg, static_cast<SynthonId>(*s))) {
        fail("synthon id '" + std::string(ids[pos]) + "' is not eligible for R-group " +
             std::to_string(rg));
      }
      chi.assignment.push_back({rg, static_cast<SynthonId>(*s)});
    }
    if (fields[2].empty()) fail("empty task name");
    const auto value = text::parse_double(fields[3]);
    if (!value) fail("malformed numeric value '" + std::string(fields[3]) + "'");
    const auto g = library.encode_index(chi).value;
    if (!seen.emplace(g, std::string(fields[2])).second) {
      fail("duplicate label for the same product and task");
    }
    dataset.rows.push_back({std::move(chi), std::string(fields[2]), *value});
  }
  return dataset;
}

void save_labels(const LabeledDataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_labels(out, dataset);
  if (!out) throw Error("failed writing " + path);
}

LabeledDataset load_labels(const std::string& path, const CslLibrary& library) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open labels file " + path);
  return read_labels(in, library);
}

}  // namespace apex
