#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "apex/error.hpp"
#include "apex/factorizer.hpp"
#include "fixtures.hpp"

namespace apex {
namespace {

using testing::make_library;

FactorizerConfig small_config(std::size_t d = 8) {
  FactorizerConfig c;
  c.synthon_dim = 12;
  c.rgroup_dim = 10;
  c.reaction_dim = 6;
  c.value_dim = 8;
  c.hidden = 16;
  c.embedding_dim = d;
  return c;
}

FeatureConfig small_features() {
  FeatureConfig f;
  f.dim = 24;
  f.cross_terms = 0;
  return f;
}

// Randomly initialised linear encoder over q = 0 features: embeddings are
// exactly additive over synthons without any training.
SurrogateModel additive_surrogate(std::size_t d, std::uint64_t seed) {
  SurrogateConfig sc;
  sc.kind = EncoderKind::linear;
  sc.embedding_dim = d;
  return SurrogateModel(sc, small_features(), {"y"}, seed);
}

MultiIndex random_product(const CslLibrary& lib, std::mt19937_64& rng) {
  return lib.decode_index(
      GlobalIndex{std::uniform_int_distribution<std::uint64_t>(0, lib.product_count() - 1)(rng)});
}

TEST(CanonicalMean, BitIdenticalUnderPermutation) {
  Eigen::MatrixXd members = Eigen::MatrixXd::Random(5, 9);
  members(0, 3) = members(0, 5);  // tie in the first coordinate
  std::vector<Eigen::Index> ids = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  const auto ref = canonical_mean(members, ids);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto m = canonical_mean(members, ids);
    for (Eigen::Index j = 0; j < m.size(); ++j) ASSERT_EQ(m[j], ref[j]);
  }
  EXPECT_TRUE(ref.isApprox(members.rowwise().mean(), 1e-14));
}

TEST(Hierarchy, OneSynthonEncoderEvaluationPerSynthon) {
  SyntheticConfig sc;
  sc.n_reactions = 6;
  sc.synthons_min = 5;
  sc.synthons_max = 30;
  sc.share_rate = 0.3;
  const auto lib = generate_synthetic(sc, 3);
  ASSERT_GT(lib.pair_count(), lib.synthon_count());
  const Factorizer f(small_config(), small_features(), 1);
  const auto cache = encode_hierarchy(f, lib);
  EXPECT_EQ(cache.synthon_encoder_evaluations, lib.synthon_count());
  EXPECT_EQ(cache.pair_rows(), lib.pair_count());
  EXPECT_EQ(cache.embedding_dim(), 8u);
}

TEST(Hierarchy, ThirtyThousandSynthonsAtFullWidth) {
  const auto lib = make_library({{10000, 10000, 10000}});
  auto cfg = small_config(1024);
  cfg.value_dim = 2;
  const Factorizer f(cfg, small_features(), 2);
  const auto cache = encode_hierarchy(f, lib);
  EXPECT_EQ(cache.synthon_encoder_evaluations, 30000u);
  EXPECT_EQ(cache.associative_bytes(4), 122'880'000u);
}

TEST(Hierarchy, RgroupEmbeddingIgnoresSynthonOrder) {
  const auto lib = make_library({{7, 5}, {4, 4, 4}});
  auto reactions = lib.reactions();
  std::mt19937_64 rng(4);
  for (auto& rx : reactions) {
    for (auto& rg : rx.rgroups) std::shuffle(rg.synthons.begin(), rg.synthons.end(), rng);
  }
  const CslLibrary shuffled(lib.synthons(), reactions);
  const Factorizer f(small_config(), small_features(), 5);
  const auto a = encode_hierarchy(f, lib);
  const auto b = encode_hierarchy(f, shuffled);
  EXPECT_EQ(a.rgroup, b.rgroup);
  EXPECT_EQ(a.reaction, b.reaction);
}

TEST(Reconstruct, ZeroModelGivesZero) {
  const auto lib = make_library({{3, 4}});
  const auto f = Factorizer::zeros(small_config(), small_features());
  const auto cache = encode_hierarchy(f, lib);
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    EXPECT_EQ(reconstruct(cache, lib, lib.decode_index(GlobalIndex{g})), Eigen::VectorXd::Zero(8));
  }
}

TEST(Reconstruct, TwoComponentSumOfPairs) {
  const auto lib = make_library({{3, 4}});
  const Factorizer f(small_config(), small_features(), 6);
  const auto cache = encode_hierarchy(f, lib);
  const auto chi = lib.decode_index(GlobalIndex{7});  // digits (1, 3)
  const Eigen::VectorXd expect = cache.associative.col(lib.pair_offset(0) + 1) +
                                 cache.associative.col(lib.pair_offset(1) + 3);
  EXPECT_EQ(reconstruct(cache, lib, chi), expect);
}

TEST(Reconstruct, CacheMatchesDirectForwardPass) {
  SyntheticConfig sc;
  sc.n_reactions = 6;
  sc.synthons_min = 4;
  sc.synthons_max = 20;
  sc.share_rate = 0.2;
  const auto lib = generate_synthetic(sc, 7);
  const Factorizer f(small_config(), small_features(), 8);
  const auto cache = encode_hierarchy(f, lib);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    const auto chi = random_product(lib, rng);
    const auto a = reconstruct(cache, lib, chi);
    const auto b = reconstruct_direct(f, lib, chi);
    ASSERT_TRUE(a.isApprox(b, 1e-12)) << "product " << lib.encode_index(chi).value;
  }
}

TEST(Reconstruct, RejectsForeignLibrary) {
  const auto lib = make_library({{3, 4}});
  const auto other = make_library({{4, 3}});
  const Factorizer f(small_config(), small_features(), 1);
  const auto cache = encode_hierarchy(f, lib);
  EXPECT_THROW(reconstruct(cache, other, other.decode_index(GlobalIndex{0})), Error);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  const auto lib = make_library({{3, 4}, {2, 3, 2}});
  const Factorizer f(small_config(4), small_features(), 10);
  const FeatureTable table(lib, small_features());
  std::mt19937_64 rng(11);
  std::vector<MultiIndex> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_product(lib, rng));
  const Eigen::MatrixXd targets = Eigen::MatrixXd::Random(4, 5);

  auto grad = Factorizer::zeros(f.config(), f.feature_config());
  factorizer_objective(f, lib, table.synthons(), batch, targets, &grad);
  nn::ConstParamList gp;
  grad.collect(gp);
  const auto g = nn::flatten(gp);

  auto probe = f;
  nn::ParamList params;
  probe.collect(params);
  const auto theta = nn::flatten(nn::ConstParamList(params.begin(), params.end()));
  ASSERT_EQ(theta.size(), g.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < theta.size(); i += 11) {
    auto plus = theta, minus = theta;
    plus[i] += h;
    minus[i] -= h;
    nn::unflatten(plus, params);
    const double lp = factorizer_objective(probe, lib, table.synthons(), batch, targets, nullptr);
    nn::unflatten(minus, params);
    const double lm = factorizer_objective(probe, lib, table.synthons(), batch, targets, nullptr);
    const double fd = (lp - lm) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "parameter " << i;
  }
}

FactorizerTrainConfig quick_train(std::size_t steps) {
  FactorizerTrainConfig t;
  t.steps = steps;
  t.batch_size = 64;
  t.learning_rate = 3e-3;
  t.seed = 2;
  t.refine_samples = 2048;
  return t;
}

TEST(Train, ZeroEncoderIsReproducedExactly) {
  const auto lib = make_library({{6, 5}, {4, 4, 3}});
  SurrogateConfig sc;
  sc.kind = EncoderKind::linear;
  sc.embedding_dim = 8;
  const auto zero = SurrogateModel::zeros(sc, small_features(), {"y"});
  const auto f = train_factorizer(lib, zero, small_config(), small_features(), quick_train(100));
  std::vector<MultiIndex> all;
  for (const auto& chi : enumerate_products(lib, GlobalIndex{0}, GlobalIndex{lib.product_count()})) {
    all.push_back(chi);
  }
  EXPECT_LT(reconstruction_loss(f, zero, lib, all), 1e-12);
}

TEST(Train, AdditiveEmbeddingsAreReproduced) {
  SyntheticConfig sc;
  sc.n_reactions = 4;
  sc.synthons_min = sc.synthons_max = 12;
  const auto lib = generate_synthetic(sc, 13);
  const auto sur = additive_surrogate(8, 14);
  // With d_U at least the R-group size every key block is fully determined
  // by the values, so the refinement reaches an exact fit.
  auto cfg = small_config();
  cfg.value_dim = 16;
  FactorizerTrainReport report;
  const auto f = train_factorizer(lib, sur, cfg, small_features(), quick_train(300), &report);
  EXPECT_EQ(report.surrogate_checksum_before, report.surrogate_checksum_after);
  const auto gap = factorization_gap(f, sur, lib, 2000, 3);
  EXPECT_GE(gap.mean, 0.0);
  EXPECT_LT(gap.mean, 1e-6 * gap.embedding_rms);
  EXPECT_LE(gap.p95, gap.max);
}

TEST(Train, LossOnFixedSetIgnoresOrder) {
  const auto lib = make_library({{6, 5}, {4, 4, 3}});
  const auto sur = additive_surrogate(8, 15);
  auto t = quick_train(50);
  t.refine_rounds = 0;
  const auto f = train_factorizer(lib, sur, small_config(), small_features(), t);
  std::vector<MultiIndex> set;
  std::mt19937_64 rng(16);
  for (int i = 0; i < 200; ++i) set.push_back(random_product(lib, rng));
  const double a = reconstruction_loss(f, sur, lib, set);
  std::reverse(set.begin(), set.end());
  std::shuffle(set.begin(), set.end(), rng);
  EXPECT_NEAR(reconstruction_loss(f, sur, lib, set), a, 1e-12 * a);
}

TEST(Train, GapShrinksAsTrainingDoubles) {
  SyntheticConfig sc;
  sc.n_reactions = 4;
  sc.synthons_min = sc.synthons_max = 12;
  const auto lib = generate_synthetic(sc, 17);
  const auto sur = additive_surrogate(8, 18);
  std::vector<double> gaps;
  for (std::size_t steps : {100, 200, 400}) {
    auto t = quick_train(steps);
    t.refine_rounds = 0;
    const auto f = train_factorizer(lib, sur, small_config(), small_features(), t);
    gaps.push_back(factorization_gap(f, sur, lib, 2000, 4).mean);
  }
  EXPECT_LE(gaps[1], gaps[0] * 1.1);
  EXPECT_LE(gaps[2], gaps[1] * 1.1);
  EXPECT_LT(gaps[2], gaps[0]);
}

TEST(Train, DeterministicAndChecksDimensions) {
  const auto lib = make_library({{5, 5}, {3, 3, 3}});
  const auto sur = additive_surrogate(8, 19);
  const auto a = train_factorizer(lib, sur, small_config(), small_features(), quick_train(30));
  const auto b = train_factorizer(lib, sur, small_config(), small_features(), quick_train(30));
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_THROW(train_factorizer(lib, sur, small_config(16), small_features(), quick_train(5)), Error);
}

TEST(Checkpoint, JsonRoundTripIsExact) {
  const Factorizer f(small_config(), small_features(), 20);
  const auto text = factorizer_to_json(f);
  const auto back = factorizer_from_json(text);
  EXPECT_EQ(back.checksum(), f.checksum());
  EXPECT_EQ(factorizer_to_json(back), text);
  EXPECT_THROW(factorizer_from_json("{}"), Error);
}

TEST(Checkpoint, CacheFileHeader) {
  const auto lib = make_library({{2, 3}});
  const Factorizer f(small_config(), small_features(), 21);
  const auto cache = encode_hierarchy(f, lib);
  std::ostringstream out;
  write_cache(out, cache, lib);
  const auto bytes = out.str();
  EXPECT_EQ(bytes.substr(0, 8), "APEXHCH1");
  // magic, version, fingerprint, d, rows, 5 pairs, 5 x 8 floats
  EXPECT_EQ(bytes.size(), 8u + 4 + 8 + 4 + 8 + 5 * 8 + 5 * 8 * 4);
}

}  // namespace
}  // namespace apex
