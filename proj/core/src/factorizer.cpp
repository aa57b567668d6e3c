#include "apex/factorizer.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "apex/error.hpp"
#include "nn_json.hpp"

namespace apex {

namespace {

nn::MlpSpec spec(std::size_t in, std::size_t hidden, std::size_t out, nn::Activation act,
                 bool skip) {
  nn::MlpSpec s;
  s.input = in;
  s.hidden = {hidden};
  s.output = out;
  s.activation = act;
  s.linear_skip = skip;
  return s;
}

void check_config(const FactorizerConfig& c, const FeatureConfig& f) {
  if (c.synthon_dim == 0 || c.rgroup_dim == 0 || c.reaction_dim == 0 || c.value_dim == 0 ||
      c.hidden == 0 || c.embedding_dim == 0 || f.dim == 0) {
    throw Error("factorizer dimensions must be positive");
  }
}

struct Shapes {
  nn::MlpSpec synthon, rg_elem, rg_post, rx_elem, rx_post, value, key;
};

Shapes shapes(const FactorizerConfig& c, const FeatureConfig& f) {
  const auto a = c.activation;
  return {spec(f.dim, c.hidden, c.synthon_dim, a, true),
          spec(c.synthon_dim, c.hidden, c.hidden, a, false),
          spec(c.hidden, c.hidden, c.rgroup_dim, a, false),
          spec(c.rgroup_dim, c.hidden, c.hidden, a, false),
          spec(c.hidden, c.hidden, c.reaction_dim, a, false),
          spec(c.synthon_dim, c.hidden, c.value_dim, a, true),
          spec(c.rgroup_dim + c.reaction_dim, c.hidden, c.embedding_dim * c.value_dim, a, true)};
}

// Member lists of every R-group (synthon ids) and reaction (R-group ids).
struct Membership {
  std::vector<std::vector<Eigen::Index>> rgroup;
  std::vector<std::vector<Eigen::Index>> reaction;
  std::vector<Eigen::Index> parent;  // reaction of each R-group
};

Membership membership(const CslLibrary& library) {
  Membership m;
  m.rgroup.resize(library.rgroup_count());
  m.parent.resize(library.rgroup_count());
  for (const auto& rx : library.reactions()) {
    auto& ids = m.reaction.emplace_back();
    for (const auto& rg : rx.rgroups) {
      ids.push_back(rg.id);
      m.parent[rg.id] = rx.id;
      m.rgroup[rg.id].assign(rg.synthons.begin(), rg.synthons.end());
    }
  }
  return m;
}

Eigen::MatrixXd pool(const Eigen::MatrixXd& members,
                     const std::vector<std::vector<Eigen::Index>>& sets) {
  Eigen::MatrixXd out(members.rows(), static_cast<Eigen::Index>(sets.size()));
  for (std::size_t k = 0; k < sets.size(); ++k) {
    out.col(static_cast<Eigen::Index>(k)) = canonical_mean(members, sets[k]);
  }
  return out;
}

// Every intermediate of one full pass over the hierarchy.
struct Pass {
  nn::MlpTape syn, rg_elem, rg_post, rx_elem, rx_post, value, key;
  Eigen::MatrixXd h_s, h_r, h_t, value_out, key_out;
};

void forward(const Factorizer& f, const Membership& m, const Eigen::MatrixXd& features, Pass& p) {
  p.h_s = f.synthon_encoder.forward(features, p.syn);
  const Eigen::MatrixXd rg_elem = f.rgroup_encoder.element.forward(p.h_s, p.rg_elem);
  p.h_r = f.rgroup_encoder.post.forward(pool(rg_elem, m.rgroup), p.rg_post);
  const Eigen::MatrixXd rx_elem = f.reaction_encoder.element.forward(p.h_r, p.rx_elem);
  p.h_t = f.reaction_encoder.post.forward(pool(rx_elem, m.reaction), p.rx_post);
  p.value_out = f.value_encoder.forward(p.h_s, p.value);

  const Eigen::Index n_r = p.h_r.cols();
  Eigen::MatrixXd key_in(p.h_r.rows() + p.h_t.rows(), n_r);
  for (Eigen::Index r = 0; r < n_r; ++r) {
    key_in.col(r) << p.h_r.col(r), p.h_t.col(m.parent[static_cast<std::size_t>(r)]);
  }
  p.key_out = f.key_encoder.forward(key_in, p.key);
}

// Backpropagates d(loss)/d(key_out) and d(loss)/d(value_out) through the
// whole hierarchy, accumulating into `g`.
void backward(const Factorizer& f, const Membership& m, const Pass& p, const Eigen::MatrixXd& d_key,
              const Eigen::MatrixXd& d_value, Factorizer& g) {
  const Eigen::Index d_r = p.h_r.rows();
  const Eigen::Index n_r = p.h_r.cols();

  Eigen::MatrixXd d_key_in;
  f.key_encoder.backward(p.key, d_key, g.key_encoder, &d_key_in);
  Eigen::MatrixXd d_hr = d_key_in.topRows(d_r);
  Eigen::MatrixXd d_ht = Eigen::MatrixXd::Zero(p.h_t.rows(), p.h_t.cols());
  for (Eigen::Index r = 0; r < n_r; ++r) {
    d_ht.col(m.parent[static_cast<std::size_t>(r)]) += d_key_in.col(r).tail(p.h_t.rows());
  }

  Eigen::MatrixXd d_pool;
  f.reaction_encoder.post.backward(p.rx_post, d_ht, g.reaction_encoder.post, &d_pool);
  Eigen::MatrixXd d_elem(d_pool.rows(), n_r);
  for (std::size_t t = 0; t < m.reaction.size(); ++t) {
    const double inv = 1.0 / static_cast<double>(m.reaction[t].size());
    for (auto r : m.reaction[t]) d_elem.col(r) = d_pool.col(static_cast<Eigen::Index>(t)) * inv;
  }
  Eigen::MatrixXd d_member;
  f.reaction_encoder.element.backward(p.rx_elem, d_elem, g.reaction_encoder.element, &d_member);
  d_hr += d_member;

  f.rgroup_encoder.post.backward(p.rg_post, d_hr, g.rgroup_encoder.post, &d_pool);
  d_elem = Eigen::MatrixXd::Zero(d_pool.rows(), p.h_s.cols());
  for (std::size_t r = 0; r < m.rgroup.size(); ++r) {
    const double inv = 1.0 / static_cast<double>(m.rgroup[r].size());
    for (auto s : m.rgroup[r]) d_elem.col(s) += d_pool.col(static_cast<Eigen::Index>(r)) * inv;
  }
  Eigen::MatrixXd d_hs;
  f.rgroup_encoder.element.backward(p.rg_elem, d_elem, g.rgroup_encoder.element, &d_hs);

  f.value_encoder.backward(p.value, d_value, g.value_encoder, &d_member);
  d_hs += d_member;
  f.synthon_encoder.backward(p.syn, d_hs, g.synthon_encoder, nullptr);
}

using KeyMap = Eigen::Map<const Eigen::MatrixXd>;

KeyMap key_matrix(const Eigen::MatrixXd& key_out, Eigen::Index r, Eigen::Index d,
                  Eigen::Index d_u) {
  return KeyMap(key_out.col(r).data(), d, d_u);
}

void check_pair(const CslLibrary& library, const MultiIndex& chi, std::size_t position) {
  const auto& a = chi.assignment[position];
  if (a.rgroup >= library.rgroup_count() || !library.position_of(a.rgroup, a.synthon)) {
    throw Error("pair (rgroup " + std::to_string(a.rgroup) + ", synthon " +
                std::to_string(a.synthon) + ") is not in the library");
  }
}

Eigen::MatrixXd surrogate_targets(const SurrogateModel& surrogate, const FeatureTable& table,
                                  std::span<const MultiIndex> products) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(table.product_dim()),
                    static_cast<Eigen::Index>(products.size()));
  for (std::size_t b = 0; b < products.size(); ++b) {
    table.product_features(products[b], x.col(static_cast<Eigen::Index>(b)));
  }
  return surrogate.encode_batch(x);
}

}  // namespace

void DeepSet::collect(nn::ParamList& out) {
  element.collect(out);
  post.collect(out);
}

void DeepSet::collect(nn::ConstParamList& out) const {
  element.collect(out);
  post.collect(out);
}

Factorizer Factorizer::zeros(const FactorizerConfig& config, FeatureConfig synthon_features) {
  check_config(config, synthon_features);
  const auto s = shapes(config, synthon_features);
  Factorizer f;
  f.config_ = config;
  f.features_ = synthon_features;
  f.synthon_encoder = nn::Mlp::zeros(s.synthon);
  f.rgroup_encoder = {nn::Mlp::zeros(s.rg_elem), nn::Mlp::zeros(s.rg_post)};
  f.reaction_encoder = {nn::Mlp::zeros(s.rx_elem), nn::Mlp::zeros(s.rx_post)};
  f.value_encoder = nn::Mlp::zeros(s.value);
  f.key_encoder = nn::Mlp::zeros(s.key);
  return f;
}

Factorizer::Factorizer(const FactorizerConfig& config, FeatureConfig synthon_features,
                       std::uint64_t seed)
    : config_(config), features_(synthon_features) {
  check_config(config, synthon_features);
  const auto s = shapes(config, synthon_features);
  std::mt19937_64 rng(seed);
  synthon_encoder = nn::Mlp(s.synthon, rng);
  rgroup_encoder.element = nn::Mlp(s.rg_elem, rng);
  rgroup_encoder.post = nn::Mlp(s.rg_post, rng);
  reaction_encoder.element = nn::Mlp(s.rx_elem, rng);
  reaction_encoder.post = nn::Mlp(s.rx_post, rng);
  value_encoder = nn::Mlp(s.value, rng);
  key_encoder = nn::Mlp(s.key, rng);
}

void Factorizer::collect(nn::ParamList& out) {
  synthon_encoder.collect(out);
  rgroup_encoder.collect(out);
  reaction_encoder.collect(out);
  value_encoder.collect(out);
  key_encoder.collect(out);
}

void Factorizer::collect(nn::ConstParamList& out) const {
  synthon_encoder.collect(out);
  rgroup_encoder.collect(out);
  reaction_encoder.collect(out);
  value_encoder.collect(out);
  key_encoder.collect(out);
}

std::uint64_t Factorizer::checksum() const {
  nn::ConstParamList params;
  collect(params);
  return nn::checksum(params);
}

Eigen::VectorXd canonical_mean(const Eigen::MatrixXd& members, std::span<const Eigen::Index> ids) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(members.rows());
  if (ids.empty()) return sum;
  std::vector<Eigen::Index> order(ids.begin(), ids.end());
  const Eigen::Index rows = members.rows();
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const double* pa = members.col(a).data();
    const double* pb = members.col(b).data();
    return std::lexicographical_compare(pa, pa + rows, pb, pb + rows);
  });
  for (auto i : order) sum += members.col(i);
  return sum / static_cast<double>(order.size());
}

HierarchyCache encode_hierarchy(const Factorizer& factorizer, const CslLibrary& library) {
  const FeatureTable table(library, factorizer.feature_config());
  const Membership m = membership(library);
  Pass p;
  forward(factorizer, m, table.synthons(), p);

  HierarchyCache cache;
  cache.library_fingerprint = library.fingerprint();
  cache.synthon_encoder_evaluations = library.synthon_count();
  const auto d = static_cast<Eigen::Index>(factorizer.config().embedding_dim);
  const auto d_u = static_cast<Eigen::Index>(factorizer.config().value_dim);
  cache.associative.resize(d, static_cast<Eigen::Index>(library.pair_count()));
  for (std::size_t r = 0; r < m.rgroup.size(); ++r) {
    const auto k = key_matrix(p.key_out, static_cast<Eigen::Index>(r), d, d_u);
    const auto offset = static_cast<Eigen::Index>(library.pair_offset(static_cast<RgroupId>(r)));
    for (std::size_t j = 0; j < m.rgroup[r].size(); ++j) {
      cache.associative.col(offset + static_cast<Eigen::Index>(j)).noalias() =
          k * p.value_out.col(m.rgroup[r][j]);
    }
  }
  cache.synthon = std::move(p.h_s);
  cache.rgroup = std::move(p.h_r);
  cache.reaction = std::move(p.h_t);
  cache.value = std::move(p.value_out);
  return cache;
}

Eigen::VectorXd reconstruct(const HierarchyCache& cache, const CslLibrary& library,
                            const MultiIndex& chi) {
  if (cache.library_fingerprint != library.fingerprint()) {
    throw Error("hierarchy cache was built for a different library");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(cache.associative.rows());
  for (std::size_t i = 0; i < chi.assignment.size(); ++i) {
    check_pair(library, chi, i);
    const auto& a = chi.assignment[i];
    const auto row = library.pair_offset(a.rgroup) + *library.position_of(a.rgroup, a.synthon);
    out += cache.associative.col(static_cast<Eigen::Index>(row));
  }
  return out;
}

Eigen::VectorXd reconstruct_direct(const Factorizer& factorizer, const CslLibrary& library,
                                   const MultiIndex& chi) {
  if (chi.reaction >= library.reaction_count()) throw Error("reaction id out of range");
  const auto& rx = library.reactions()[chi.reaction];
  if (chi.assignment.size() != rx.rgroups.size()) throw Error("assignment size mismatch");
  const auto& fc = factorizer.config();
  const auto d = static_cast<Eigen::Index>(fc.embedding_dim);
  const auto d_u = static_cast<Eigen::Index>(fc.value_dim);

  std::vector<Eigen::MatrixXd> h_r_elem;
  Eigen::MatrixXd h_r(static_cast<Eigen::Index>(fc.rgroup_dim),
                      static_cast<Eigen::Index>(rx.rgroups.size()));
  Eigen::MatrixXd chosen(static_cast<Eigen::Index>(factorizer.feature_config().dim),
                         static_cast<Eigen::Index>(rx.rgroups.size()));
  for (std::size_t i = 0; i < rx.rgroups.size(); ++i) {
    const auto& rg = rx.rgroups[i];
    if (chi.assignment[i].rgroup != rg.id) throw Error("assignment R-group order mismatch");
    check_pair(library, chi, i);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(factorizer.feature_config().dim),
                      static_cast<Eigen::Index>(rg.synthons.size()));
    for (std::size_t j = 0; j < rg.synthons.size(); ++j) {
      x.col(static_cast<Eigen::Index>(j)) =
          synthon_features(library.synthons()[rg.synthons[j]].token, factorizer.feature_config());
    }
    chosen.col(static_cast<Eigen::Index>(i)) = synthon_features(
        library.synthons()[chi.assignment[i].synthon].token, factorizer.feature_config());
    const Eigen::MatrixXd elem =
        factorizer.rgroup_encoder.element.forward(factorizer.synthon_encoder.forward(x));
    std::vector<Eigen::Index> all(rg.synthons.size());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<Eigen::Index>(j);
    h_r.col(static_cast<Eigen::Index>(i)) =
        factorizer.rgroup_encoder.post.forward(canonical_mean(elem, all));
  }
  std::vector<Eigen::Index> all(rx.rgroups.size());
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<Eigen::Index>(j);
  const Eigen::VectorXd h_t = factorizer.reaction_encoder.post.forward(
      canonical_mean(factorizer.reaction_encoder.element.forward(h_r), all));
  const Eigen::MatrixXd v =
      factorizer.value_encoder.forward(factorizer.synthon_encoder.forward(chosen));

  Eigen::VectorXd out = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < rx.rgroups.size(); ++i) {
    Eigen::VectorXd key_in(h_r.rows() + h_t.rows());
    key_in << h_r.col(static_cast<Eigen::Index>(i)), h_t;
    const Eigen::MatrixXd key_out = factorizer.key_encoder.forward(key_in);
    out += key_matrix(key_out, 0, d, d_u) * v.col(static_cast<Eigen::Index>(i));
  }
  return out;
}

double factorizer_objective(const Factorizer& factorizer, const CslLibrary& library,
                            const Eigen::MatrixXd& synthon_features,
                            std::span<const MultiIndex> batch, const Eigen::MatrixXd& targets,
                            Factorizer* grad) {
  const auto& fc = factorizer.config();
  const auto d = static_cast<Eigen::Index>(fc.embedding_dim);
  const auto d_u = static_cast<Eigen::Index>(fc.value_dim);
  if (targets.rows() != d || targets.cols() != static_cast<Eigen::Index>(batch.size())) {
    throw Error("factorizer targets have the wrong shape");
  }
  if (synthon_features.cols() != static_cast<Eigen::Index>(library.synthon_count())) {
    throw Error("synthon feature matrix does not cover the library");
  }
  if (batch.empty()) return 0.0;
  const Membership m = membership(library);
  Pass p;
  forward(factorizer, m, synthon_features, p);

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Eigen::MatrixXd d_key, d_value;
  if (grad) {
    d_key = Eigen::MatrixXd::Zero(p.key_out.rows(), p.key_out.cols());
    d_value = Eigen::MatrixXd::Zero(p.value_out.rows(), p.value_out.cols());
  }
  double loss = 0.0;
  Eigen::VectorXd g_hat(d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& chi = batch[b];
    g_hat.setZero();
    for (const auto& a : chi.assignment) {
      g_hat.noalias() += key_matrix(p.key_out, a.rgroup, d, d_u) * p.value_out.col(a.synthon);
    }
    const Eigen::VectorXd err = g_hat - targets.col(static_cast<Eigen::Index>(b));
    loss += err.squaredNorm();
    if (!grad) continue;
    const Eigen::VectorXd e = (2.0 * inv_b) * err;
    for (const auto& a : chi.assignment) {
      Eigen::Map<Eigen::MatrixXd> dk(d_key.col(a.rgroup).data(), d, d_u);
      dk.noalias() += e * p.value_out.col(a.synthon).transpose();
      d_value.col(a.synthon).noalias() +=
          key_matrix(p.key_out, a.rgroup, d, d_u).transpose() * e;
    }
  }
  if (grad) backward(factorizer, m, p, d_key, d_value, *grad);
  return loss * inv_b;
}

namespace {

// Adds delta (out x (hidden + 1 + input)) to the output layer of a one-hidden-
// layer network with a linear skip: [W_out | b_out | skip].
void shift_output_layer(nn::Mlp& net, const Eigen::MatrixXd& delta) {
  const Eigen::Index h = net.weights.back().cols();
  net.weights.back() += delta.leftCols(h);
  net.biases.back() += delta.col(h);
  net.skip += delta.rightCols(delta.cols() - h - 1);
}

// Columns [hidden activation; 1; input] feeding a network's output layer.
Eigen::MatrixXd output_basis(const nn::MlpTape& tape) {
  const Eigen::MatrixXd& z = tape.post.back();
  Eigen::MatrixXd phi(z.rows() + 1 + tape.input.rows(), z.cols());
  phi << z, Eigen::RowVectorXd::Ones(z.cols()), tape.input;
  return phi;
}

double ridge(const Eigen::MatrixXd& gram) {
  const double scale = gram.diagonal().cwiseAbs().mean();
  return 1e-10 * (scale > 0.0 ? scale : 1.0);
}

struct RefineData {
  const CslLibrary* library;
  const Eigen::MatrixXd* features;
  std::vector<MultiIndex> products;
  Eigen::MatrixXd targets;
  std::vector<std::vector<std::size_t>> by_reaction;
};

double sample_loss(const Factorizer& f, const RefineData& data) {
  return factorizer_objective(f, *data.library, *data.features, data.products, data.targets,
                              nullptr);
}

// Best K_r for every R-group given the current values, then the key output
// layer change that moves every K_r there (least squares over R-groups).
void refit_keys(Factorizer& f, const RefineData& data) {
  const auto& lib = *data.library;
  const auto d = static_cast<Eigen::Index>(f.config().embedding_dim);
  const auto d_u = static_cast<Eigen::Index>(f.config().value_dim);
  const Membership m = membership(lib);
  Pass p;
  forward(f, m, *data.features, p);

  Eigen::MatrixXd target = p.key_out;
  for (ReactionId t = 0; t < lib.reaction_count(); ++t) {
    const auto& ids = data.by_reaction[t];
    if (ids.empty()) continue;
    const auto& rgs = lib.reactions()[t].rgroups;
    const auto c = static_cast<Eigen::Index>(rgs.size());
    Eigen::MatrixXd z(c * d_u, static_cast<Eigen::Index>(ids.size()));
    Eigen::MatrixXd g(d, static_cast<Eigen::Index>(ids.size()));
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const auto& chi = data.products[ids[b]];
      for (Eigen::Index r = 0; r < c; ++r) {
        z.block(r * d_u, static_cast<Eigen::Index>(b), d_u, 1) =
            p.value_out.col(chi.assignment[static_cast<std::size_t>(r)].synthon);
      }
      g.col(static_cast<Eigen::Index>(b)) = data.targets.col(static_cast<Eigen::Index>(ids[b]));
    }
    // Ridge towards the current keys keeps under-determined blocks in place.
    Eigen::MatrixXd current(c * d_u, d);
    for (Eigen::Index r = 0; r < c; ++r) {
      current.middleRows(r * d_u, d_u) =
          key_matrix(p.key_out, rgs[static_cast<std::size_t>(r)].id, d, d_u).transpose();
    }
    Eigen::MatrixXd gram = z * z.transpose();
    const double lambda = ridge(gram);
    gram.diagonal().array() += lambda;
    const Eigen::MatrixXd x = gram.ldlt().solve(z * g.transpose() + lambda * current);
    for (Eigen::Index r = 0; r < c; ++r) {
      Eigen::Map<Eigen::MatrixXd>(target.col(rgs[static_cast<std::size_t>(r)].id).data(), d, d_u) =
          x.middleRows(r * d_u, d_u).transpose();
    }
  }
  const Eigen::MatrixXd phi = output_basis(p.key);
  Eigen::MatrixXd gram = phi.transpose() * phi;
  gram.diagonal().array() += ridge(gram);
  const Eigen::MatrixXd coef = gram.ldlt().solve((target - p.key_out).transpose());
  shift_output_layer(f.key_encoder, coef.transpose() * phi.transpose());
}

// Exact least squares for the value encoder's output layer M given the keys:
// sum_chi || g - sum_r K_r M phi_{s_r} ||^2 with normal matrix
// sum_{r,r'} C_{r r'} (x) K_r^T K_r'.
void refit_values(Factorizer& f, const RefineData& data) {
  const auto& lib = *data.library;
  const auto d = static_cast<Eigen::Index>(f.config().embedding_dim);
  const auto d_u = static_cast<Eigen::Index>(f.config().value_dim);
  const Membership m = membership(lib);
  Pass p;
  forward(f, m, *data.features, p);
  const Eigen::MatrixXd phi_all = output_basis(p.value);
  const Eigen::Index n_phi = phi_all.rows();
  const Eigen::Index n = d_u * n_phi;

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(d_u, n_phi);
  for (ReactionId t = 0; t < lib.reaction_count(); ++t) {
    const auto& ids = data.by_reaction[t];
    if (ids.empty()) continue;
    const auto& rgs = lib.reactions()[t].rgroups;
    const std::size_t c = rgs.size();
    const auto n_t = static_cast<Eigen::Index>(ids.size());
    std::vector<Eigen::MatrixXd> phi(c, Eigen::MatrixXd(n_phi, n_t));
    Eigen::MatrixXd g(d, n_t);
    for (Eigen::Index b = 0; b < n_t; ++b) {
      const auto& chi = data.products[ids[static_cast<std::size_t>(b)]];
      for (std::size_t r = 0; r < c; ++r) phi[r].col(b) = phi_all.col(chi.assignment[r].synthon);
      g.col(b) = data.targets.col(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(b)]));
    }
    for (std::size_t r = 0; r < c; ++r) {
      const auto k_r = key_matrix(p.key_out, rgs[r].id, d, d_u);
      rhs.noalias() += k_r.transpose() * g * phi[r].transpose();
      for (std::size_t q = 0; q < c; ++q) {
        const Eigen::MatrixXd cross = phi[r] * phi[q].transpose();
        const Eigen::MatrixXd keys = k_r.transpose() * key_matrix(p.key_out, rgs[q].id, d, d_u);
        for (Eigen::Index j = 0; j < n_phi; ++j) {
          for (Eigen::Index i = 0; i < n_phi; ++i) {
            h.block(i * d_u, j * d_u, d_u, d_u).noalias() += cross(i, j) * keys;
          }
        }
      }
    }
  }
  h.diagonal().array() += ridge(h);
  const Eigen::VectorXd x =
      h.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), rhs.size()));
  Eigen::MatrixXd layer(d_u, n_phi);
  auto& net = f.value_encoder;
  layer << net.weights.back(), net.biases.back(), net.skip;
  shift_output_layer(net, Eigen::Map<const Eigen::MatrixXd>(x.data(), d_u, n_phi) - layer);
}

}  // namespace

Factorizer train_factorizer(const CslLibrary& library, const SurrogateModel& surrogate,
                            const FactorizerConfig& config, const FeatureConfig& synthon_features,
                            const FactorizerTrainConfig& train, FactorizerTrainReport* report) {
  if (surrogate.embedding_dim() != config.embedding_dim) {
    throw Error("factorizer embedding dimension " + std::to_string(config.embedding_dim) +
                " does not match the surrogate's " + std::to_string(surrogate.embedding_dim()));
  }
  if (train.steps == 0 || train.batch_size == 0) throw Error("steps and batch size must be positive");
  if (library.product_count() == 0) throw Error("cannot train a factorizer on an empty library");

  FactorizerTrainReport local;
  local.surrogate_checksum_before = surrogate.checksum();

  const FeatureTable synthon_table(library, synthon_features);
  const FeatureTable product_table(library, surrogate.feature_config());
  std::mt19937_64 rng(train.seed);

  auto draw = [&](std::size_t n) {
    std::vector<MultiIndex> out;
    out.reserve(n);
    std::uniform_int_distribution<std::uint64_t> any(0, library.product_count() - 1);
    std::uniform_int_distribution<std::size_t> pick_rx(0, library.reaction_count() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t g = 0;
      if (train.sampling == FactorizerTrainConfig::Sampling::uniform_reaction) {
        const auto t = static_cast<ReactionId>(pick_rx(rng));
        std::uniform_int_distribution<std::uint64_t> within(0, library.reaction_product_count(t) - 1);
        g = library.reaction_offset(t) + within(rng);
      } else {
        g = any(rng);
      }
      out.push_back(library.decode_index(GlobalIndex{g}));
    }
    return out;
  };

  // Train against targets divided by their RMS, then fold the scale into the
  // key encoder's output layer (u = K v is linear in it).
  double rms = 0.0;
  {
    const auto warm = draw(std::min<std::size_t>(1024, train.batch_size * 4));
    const Eigen::MatrixXd g = surrogate_targets(surrogate, product_table, warm);
    rms = std::sqrt(g.squaredNorm() / static_cast<double>(g.size()));
    if (!(rms > 1e-300) || !std::isfinite(rms)) rms = 1.0;
  }

  Factorizer model(config, synthon_features, train.seed);
  Factorizer grad = Factorizer::zeros(config, synthon_features);
  nn::ParamList params, grad_params;
  model.collect(params);
  grad.collect(grad_params);
  const nn::ConstParamList const_params(params.begin(), params.end());
  const nn::ConstParamList const_grads(grad_params.begin(), grad_params.end());
  nn::Adam adam(const_params);

  for (std::size_t step = 0; step < train.steps; ++step) {
    const auto batch = draw(train.batch_size);
    const Eigen::MatrixXd targets = surrogate_targets(surrogate, product_table, batch) / rms;
    for (auto* g : grad_params) g->setZero();
    const double loss =
        factorizer_objective(model, library, synthon_table.synthons(), batch, targets, &grad);
    if (!std::isfinite(loss)) {
      throw Error("factorizer training diverged: non-finite loss at step " + std::to_string(step));
    }
    const bool last = step + 1 == train.steps;
    if (last || (train.log_every > 0 && step % train.log_every == 0)) {
      local.loss.emplace_back(step, loss * rms * rms);
    }
    adam.step(params, const_grads,
              nn::cosine_schedule(train.learning_rate, train.final_learning_rate, step, train.steps));
  }

  if (train.refine_rounds > 0 && train.refine_samples > 0) {
    // Products per reaction in proportion to its size, but never fewer than
    // needed to determine its keys (or the whole reaction when smaller).
    std::vector<MultiIndex> sample;
    const double total = static_cast<double>(library.product_count());
    for (ReactionId t = 0; t < library.reaction_count(); ++t) {
      const std::uint64_t n_t = library.reaction_product_count(t);
      const std::uint64_t floor_t = 4 * library.reactions()[t].rgroups.size() * config.value_dim;
      const auto share = static_cast<std::uint64_t>(
          std::llround(static_cast<double>(train.refine_samples) * static_cast<double>(n_t) / total));
      const std::uint64_t want = std::min(n_t, std::max(share, floor_t));
      for (auto g : sample_indices(n_t, want, rng())) {
        sample.push_back(library.decode_index(GlobalIndex{library.reaction_offset(t) + g}));
      }
    }
    RefineData data{&library, &synthon_table.synthons(), std::move(sample), {}, {}};
    data.targets = surrogate_targets(surrogate, product_table, data.products) / rms;
    data.by_reaction.resize(library.reaction_count());
    for (std::size_t b = 0; b < data.products.size(); ++b) {
      data.by_reaction[data.products[b].reaction].push_back(b);
    }
    double loss = sample_loss(model, data);
    local.refine_loss.push_back(loss * rms * rms);
    auto attempt = [&](auto&& refit) {
      Factorizer candidate = model;
      refit(candidate, data);
      const double after = sample_loss(candidate, data);
      if (std::isfinite(after) && after < loss) {
        model = std::move(candidate);
        loss = after;
        local.refine_loss.push_back(loss * rms * rms);
      }
    };
    for (std::size_t round = 0; round < train.refine_rounds; ++round) {
      attempt(refit_keys);
      attempt(refit_values);
    }
  }

  auto& key = model.key_encoder;
  key.weights.back() *= rms;
  key.biases.back() *= rms;
  key.skip *= rms;

  local.surrogate_checksum_after = surrogate.checksum();
  if (local.surrogate_checksum_after != local.surrogate_checksum_before) {
    throw Error("surrogate parameters changed during factorizer training");
  }
  if (report) *report = std::move(local);
  return model;
}

double reconstruction_loss(const Factorizer& factorizer, const SurrogateModel& surrogate,
                           const CslLibrary& library, std::span<const MultiIndex> products) {
  if (products.empty()) return 0.0;
  const FeatureTable product_table(library, surrogate.feature_config());
  const HierarchyCache cache = encode_hierarchy(factorizer, library);
  const Eigen::MatrixXd g = surrogate_targets(surrogate, product_table, products);
  double sum = 0.0;
  for (std::size_t b = 0; b < products.size(); ++b) {
    sum += (g.col(static_cast<Eigen::Index>(b)) - reconstruct(cache, library, products[b]))
               .squaredNorm();
  }
  return sum / static_cast<double>(products.size());
}

GapStats factorization_gap(const Factorizer& factorizer, const SurrogateModel& surrogate,
                           const CslLibrary& library, std::size_t sample_size, std::uint64_t seed) {
  GapStats stats;
  const auto n = std::min<std::uint64_t>(sample_size, library.product_count());
  if (n == 0) return stats;
  std::vector<MultiIndex> products;
  for (auto g : sample_indices(library.product_count(), n, seed)) {
    products.push_back(library.decode_index(GlobalIndex{g}));
  }
  const FeatureTable product_table(library, surrogate.feature_config());
  const HierarchyCache cache = encode_hierarchy(factorizer, library);
  const Eigen::MatrixXd g = surrogate_targets(surrogate, product_table, products);
  std::vector<double> gaps(products.size());
  double gap_sum = 0.0;
  for (std::size_t b = 0; b < products.size(); ++b) {
    gaps[b] = (g.col(static_cast<Eigen::Index>(b)) - reconstruct(cache, library, products[b])).norm();
    gap_sum += gaps[b];
  }
  stats.samples = gaps.size();
  stats.mean = gap_sum / static_cast<double>(gaps.size());
  stats.embedding_rms = std::sqrt(g.squaredNorm() / static_cast<double>(gaps.size()));
  std::sort(gaps.begin(), gaps.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(gaps.size())));
  stats.p95 = gaps[std::max<std::size_t>(rank, 1) - 1];
  stats.max = gaps.back();
  return stats;
}

std::string factorizer_to_json(const Factorizer& factorizer) {
  nlohmann::ordered_json j;
  j["format"] = "apex-factorizer";
  j["version"] = 1;
  const auto& c = factorizer.config();
  j["config"] = {{"synthon_dim", c.synthon_dim},   {"rgroup_dim", c.rgroup_dim},
                 {"reaction_dim", c.reaction_dim}, {"value_dim", c.value_dim},
                 {"hidden", c.hidden},             {"embedding_dim", c.embedding_dim},
                 {"activation", nn::to_string(c.activation)}};
  const auto& f = factorizer.feature_config();
  j["features"] = {{"dim", f.dim}, {"max_ngram", f.max_ngram}, {"scale", f.scale}, {"seed", f.seed}};
  j["synthon_encoder"] = nn::mlp_to_json(factorizer.synthon_encoder);
  j["rgroup_element"] = nn::mlp_to_json(factorizer.rgroup_encoder.element);
  j["rgroup_post"] = nn::mlp_to_json(factorizer.rgroup_encoder.post);
  j["reaction_element"] = nn::mlp_to_json(factorizer.reaction_encoder.element);
  j["reaction_post"] = nn::mlp_to_json(factorizer.reaction_encoder.post);
  j["value_encoder"] = nn::mlp_to_json(factorizer.value_encoder);
  j["key_encoder"] = nn::mlp_to_json(factorizer.key_encoder);
  return j.dump() + "\n";
}

Factorizer factorizer_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", std::string{}) != "apex-factorizer") {
      throw Error("not an apex-factorizer checkpoint");
    }
    if (j.value("version", 0) != 1) throw Error("unsupported factorizer checkpoint version");
    FactorizerConfig c;
    const auto& jc = j.at("config");
    c.synthon_dim = jc.at("synthon_dim").get<std::size_t>();
    c.rgroup_dim = jc.at("rgroup_dim").get<std::size_t>();
    c.reaction_dim = jc.at("reaction_dim").get<std::size_t>();
    c.value_dim = jc.at("value_dim").get<std::size_t>();
    c.hidden = jc.at("hidden").get<std::size_t>();
    c.embedding_dim = jc.at("embedding_dim").get<std::size_t>();
    c.activation = nn::activation_from_string(jc.at("activation").get<std::string>());
    FeatureConfig f;
    const auto& jf = j.at("features");
    f.dim = jf.at("dim").get<std::size_t>();
    f.max_ngram = jf.at("max_ngram").get<std::size_t>();
    f.scale = jf.at("scale").get<double>();
    f.seed = jf.at("seed").get<std::uint64_t>();
    Factorizer model = Factorizer::zeros(c, f);

    auto load = [&](const char* key, nn::Mlp& target) {
      nn::Mlp loaded = nn::mlp_from_json(j.at(key));
      const auto& a = loaded.spec();
      const auto& b = target.spec();
      if (a.input != b.input || a.hidden != b.hidden || a.output != b.output ||
          a.linear_skip != b.linear_skip || a.output_bias != b.output_bias) {
        throw Error(std::string("factorizer network '") + key + "' does not match its config");
      }
      target = std::move(loaded);
    };
    load("synthon_encoder", model.synthon_encoder);
    load("rgroup_element", model.rgroup_encoder.element);
    load("rgroup_post", model.rgroup_encoder.post);
    load("reaction_element", model.reaction_encoder.element);
    load("reaction_post", model.reaction_encoder.post);
    load("value_encoder", model.value_encoder);
    load("key_encoder", model.key_encoder);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed factorizer checkpoint: ") + e.what());
  }
}

void save_factorizer(const Factorizer& factorizer, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << factorizer_to_json(factorizer);
  if (!out) throw Error("failed writing " + path);
}

Factorizer load_factorizer(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open factorizer checkpoint " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return factorizer_from_json(text);
}

namespace {

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

}  // namespace

void write_cache(std::ostream& out, const HierarchyCache& cache, const CslLibrary& library) {
  if (cache.library_fingerprint != library.fingerprint()) {
    throw Error("hierarchy cache was built for a different library");
  }
  out.write("APEXHCH1", 8);
  put<std::uint32_t>(out, 1);
  put<std::uint64_t>(out, cache.library_fingerprint);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.embedding_dim()));
  put<std::uint64_t>(out, cache.pair_rows());
  // Rows are ordered by pair index, i.e. R-group id then synthon position.
  for (RgroupId r = 0; r < library.rgroup_count(); ++r) {
    for (auto s : library.rgroup(r).synthons) {
      put<std::uint32_t>(out, r);
      put<std::uint32_t>(out, s);
    }
  }
  std::vector<float> row(cache.embedding_dim());
  for (Eigen::Index c = 0; c < cache.associative.cols(); ++c) {
    for (Eigen::Index i = 0; i < cache.associative.rows(); ++i) {
      row[static_cast<std::size_t>(i)] = static_cast<float>(cache.associative(i, c));
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw Error("failed writing hierarchy cache");
}

void save_cache(const HierarchyCache& cache, const CslLibrary& library, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_cache(out, cache, library);
}

}  // namespace apex
