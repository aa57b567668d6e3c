#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "apex/error.hpp"
#include "apex/props.hpp"
#include "fixtures.hpp"

namespace apex {
namespace {

using testing::make_library;

TEST(SynthonFeatures, IdenticalTokensIdenticalVectors) {
  EXPECT_EQ(synthon_features("C(=O)N*"), synthon_features("C(=O)N*"));
}

TEST(SynthonFeatures, SingleCharacterIsOneBucket) {
  FeatureConfig cfg;
  cfg.scale = 1.0;
  const auto v = synthon_features("X", cfg);
  EXPECT_EQ(v.sum(), 1.0);
  EXPECT_EQ((v.array() != 0.0).count(), 1);
}

TEST(SynthonFeatures, CountsEveryNgram) {
  FeatureConfig cfg;
  cfg.scale = 1.0;
  cfg.dim = 4096;
  // "abcd": 4 unigrams, 3 bigrams, 2 trigrams.
  EXPECT_EQ(synthon_features("abcd", cfg).sum(), 9.0);
  cfg.scale = 0.5;
  EXPECT_EQ(synthon_features("abcd", cfg).sum(), 4.5);
}

TEST(SynthonFeatures, DisjointNgramsAreOrthogonal) {
  FeatureConfig cfg;
  cfg.dim = 1 << 16;  // wide enough that these few n-grams do not collide
  const auto a = synthon_features("abc", cfg);
  const auto b = synthon_features("xyz", cfg);
  EXPECT_EQ(a.dot(b), 0.0);
}

TEST(SynthonFeatures, RejectsEmptyToken) { EXPECT_THROW(synthon_features(""), Error); }

TEST(ProductFeatures, SingleComponentPairsWithItself) {
  // Libraries require two R-groups per reaction, so the degenerate case is
  // exercised through a one-element assignment. Synthon 0 is shared by both
  // R-groups, which gives the same self product through a valid index.
  const CslLibrary lib({{0, "CCN*"}, {1, "O*"}}, {{0, {{0, {0}}, {1, {0, 1}}}}});
  FeatureConfig cfg;
  cfg.cross_terms = 5;
  const FeatureTable table(lib, cfg);
  const auto q = static_cast<Eigen::Index>(cfg.cross_terms);
  const MultiIndex single{0, {{0, 0}}};
  const auto f = table.product_features(single);
  ASSERT_EQ(f.size(), static_cast<Eigen::Index>(cfg.dim) + q);
  EXPECT_EQ(f.head(static_cast<Eigen::Index>(cfg.dim)), table.synthon(0));
  EXPECT_NE(f.tail(q).squaredNorm(), 0.0);

  const auto doubled = table.product_features(lib.decode_index(GlobalIndex{0}));
  EXPECT_EQ(doubled.head(static_cast<Eigen::Index>(cfg.dim)), 2.0 * table.synthon(0));
  EXPECT_EQ(doubled.tail(q), f.tail(q));
}

TEST(ProductFeatures, SummedPartIsAdditive) {
  SyntheticConfig sc;
  sc.n_reactions = 4;
  const auto lib = generate_synthetic(sc, 3);
  FeatureConfig cfg;
  const FeatureTable table(lib, cfg);
  const auto p = static_cast<Eigen::Index>(cfg.dim);
  for (std::uint64_t g = 0; g < lib.product_count(); g += 7) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(p);
    for (const auto& a : chi.assignment) sum += synthon_features(lib.synthons()[a.synthon].token, cfg);
    ASSERT_TRUE(table.product_features(chi).head(p).isApprox(sum, 1e-12));
  }
}

TEST(ProductFeatures, RgroupOrderDoesNotChangeSummedPart) {
  const CslLibrary ab({{0, "CCO*"}, {1, "N*C"}}, {{0, {{0, {0}}, {1, {1}}}}});
  const CslLibrary ba({{0, "CCO*"}, {1, "N*C"}}, {{0, {{0, {1}}, {1, {0}}}}});
  FeatureConfig cfg;
  const auto p = static_cast<Eigen::Index>(cfg.dim);
  const auto fa = product_features(ab, ab.decode_index(GlobalIndex{0}), cfg);
  const auto fb = product_features(ba, ba.decode_index(GlobalIndex{0}), cfg);
  EXPECT_EQ(fa.head(p), fb.head(p));
}

TEST(ProductFeatures, ZeroCrossTerms) {
  const auto lib = make_library({{3, 3}});
  FeatureConfig cfg;
  cfg.cross_terms = 0;
  EXPECT_EQ(product_features(lib, lib.decode_index(GlobalIndex{4}), cfg).size(),
            static_cast<Eigen::Index>(cfg.dim));
}

OracleConfig single_task(TaskDef t, std::uint64_t seed = 5) {
  OracleConfig cfg;
  cfg.seed = seed;
  cfg.tasks.push_back(std::move(t));
  return cfg;
}

TEST(Oracle, ZeroLatentsGiveZero) {
  TaskDef t;
  t.name = "y";
  t.weight_mean = 0.0;
  t.weight_sd = 0.0;
  const auto lib = make_library({{4, 5}, {3, 3, 3}});
  const GroundTruthOracle oracle(single_task(t), lib);
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    EXPECT_EQ(oracle.evaluate(lib.decode_index(GlobalIndex{g}), 0), 0.0);
  }
}

TEST(Oracle, AdditiveIsSumOfLatents) {
  TaskDef t;
  t.name = "y";
  t.offset = 1.5;
  const auto lib = make_library({{4, 5}, {3, 3, 3}});
  const GroundTruthOracle oracle(single_task(t), lib);
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    double s = 0.0;
    for (const auto& a : chi.assignment) s += oracle.latent(0, a.synthon);
    EXPECT_EQ(oracle.evaluate(chi, 0), s + 1.5);
    EXPECT_EQ(ground_truth(oracle, chi, "y"), s + 1.5);
  }
}

TEST(Oracle, LatentsAreLinearInSynthonFeatures) {
  TaskDef t;
  t.name = "y";
  const auto lib = make_library({{6, 6}});
  auto cfg = single_task(t);
  const GroundTruthOracle oracle(cfg, lib);
  const FeatureTable features(lib, cfg.features);
  // With sd 0 the weights are all weight_mean.
  t.weight_mean = 0.25;
  t.weight_sd = 0.0;
  const GroundTruthOracle flat(single_task(t), lib);
  for (SynthonId s = 0; s < lib.synthon_count(); ++s) {
    EXPECT_NEAR(flat.latent(0, s), 0.25 * features.synthon(s).sum(), 1e-12);
  }
  EXPECT_NE(oracle.latent(0, 0), flat.latent(0, 0));
}

TEST(Oracle, NonlinearAndPairwiseTermsAreDeterministic) {
  const auto lib = make_library({{10, 10, 10}});
  const GroundTruthOracle a(default_oracle_config(3), lib);
  const GroundTruthOracle b(default_oracle_config(3), lib);
  const auto i = a.task_index("dock0");
  bool differs_from_additive = false;
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    ASSERT_EQ(a.evaluate(chi, i), b.evaluate(chi, i));
    double s = 0.0;
    for (const auto& x : chi.assignment) s += a.latent(i, x.synthon);
    differs_from_additive |= a.evaluate(chi, i) != s;
  }
  EXPECT_TRUE(differs_from_additive);
}

TEST(Oracle, ExactTopKByBruteForce) {
  // The oracle top-k is by definition the brute-force sort; check that a
  // partial-sort selection and a full sort agree on a 10^4-product library.
  const auto lib = make_library({{20, 20, 20}, {40, 50}});
  const GroundTruthOracle oracle(default_oracle_config(1), lib);
  const auto task = oracle.task_index("dock1");
  std::vector<std::pair<double, std::uint64_t>> all;
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    all.emplace_back(oracle.evaluate(lib.decode_index(GlobalIndex{g}), task), g);
  }
  auto sorted = all;
  std::sort(sorted.begin(), sorted.end(), [](auto& x, auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  auto partial = all;
  std::partial_sort(partial.begin(), partial.begin() + 50, partial.end(), [](auto& x, auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], partial[i]);
}

TEST(Oracle, UnknownTaskAndDuplicates) {
  const auto lib = make_library({{2, 2}});
  const GroundTruthOracle oracle(default_oracle_config(0), lib);
  EXPECT_THROW(oracle.task_index("nope"), Error);
  auto cfg = default_oracle_config(0);
  cfg.tasks.push_back(cfg.tasks.front());
  EXPECT_THROW(GroundTruthOracle(cfg, lib), Error);
}

TEST(OracleConfig, JsonRoundTrip) {
  auto cfg = default_oracle_config(42);
  cfg.tasks[6].noise = 0.25;
  cfg.features.cross_terms = 0;
  const auto text = oracle_config_to_json(cfg);
  const auto back = oracle_config_from_json(text);
  EXPECT_EQ(oracle_config_to_json(back), text);
  EXPECT_EQ(back.tasks.size(), cfg.tasks.size());
  EXPECT_EQ(back.tasks[0].mode(), "additive+nonlinear+pairwise");
  EXPECT_EQ(back.tasks[6].mode(), "additive");
}

TEST(OracleConfig, TaskModes) {
  TaskDef t;
  parse_task_mode("additive+pairwise", t);
  EXPECT_TRUE(t.pairwise);
  EXPECT_FALSE(t.nonlinear);
  EXPECT_THROW(parse_task_mode("pairwise", t), Error);
  EXPECT_THROW(parse_task_mode("additive+cubic", t), Error);
}

TEST(Labels, FullEnumeration) {
  const auto lib = make_library({{2, 5}});
  const GroundTruthOracle oracle(additive_oracle_config(0), lib);
  const std::vector<std::string> tasks = {"dock0", "mw"};
  SampleSpec spec;
  spec.full = true;
  const auto data = label_library(oracle, lib, tasks, spec);
  EXPECT_EQ(data.rows.size(), 20u);
  EXPECT_EQ(data.task_names(), tasks);
}

TEST(Labels, EmptySample) {
  const auto lib = make_library({{2, 5}});
  const GroundTruthOracle oracle(additive_oracle_config(0), lib);
  const std::vector<std::string> tasks = {"dock0"};
  SampleSpec spec;
  spec.size = 0;
  EXPECT_TRUE(label_library(oracle, lib, tasks, spec).rows.empty());
}

TEST(Labels, SampleIsSubsetOfFull) {
  const auto lib = make_library({{20, 30}, {5, 5, 5}});
  const GroundTruthOracle oracle(default_oracle_config(9), lib);
  const std::vector<std::string> tasks = {"dock2", "logp"};
  SampleSpec full;
  full.full = true;
  SampleSpec part;
  part.size = 200;
  part.seed = 4;
  std::set<std::tuple<std::uint64_t, std::string, double>> all;
  for (const auto& r : label_library(oracle, lib, tasks, full).rows) {
    all.emplace(lib.encode_index(r.chi).value, r.task, r.value);
  }
  const auto sample = label_library(oracle, lib, tasks, part);
  EXPECT_EQ(sample.rows.size(), 400u);
  std::set<std::uint64_t> distinct;
  for (const auto& r : sample.rows) {
    EXPECT_TRUE(all.count({lib.encode_index(r.chi).value, r.task, r.value}));
    distinct.insert(lib.encode_index(r.chi).value);
  }
  EXPECT_EQ(distinct.size(), 200u);
}

TEST(Labels, SaveLoadRoundTrip) {
  const auto lib = make_library({{7, 3}, {2, 2, 2}});
  const GroundTruthOracle oracle(default_oracle_config(2), lib);
  const auto tasks = oracle.task_names();
  SampleSpec spec;
  spec.full = true;
  const auto data = label_library(oracle, lib, tasks, spec);
  std::stringstream buf;
  write_labels(buf, data);
  const auto back = read_labels(buf, lib);
  ASSERT_EQ(back.rows.size(), data.rows.size());
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].chi, data.rows[i].chi);
    EXPECT_EQ(back.rows[i].task, data.rows[i].task);
    EXPECT_EQ(back.rows[i].value, data.rows[i].value);
  }
}

TEST(Labels, HeaderOnlyFileIsEmpty) {
  const auto lib = make_library({{2, 2}});
  std::istringstream in("reaction_id\tsynthon_ids\ttask\tvalue\n");
  EXPECT_TRUE(read_labels(in, lib).rows.empty());
}

TEST(Labels, MalformedNumberNamesTheLine) {
  const auto lib = make_library({{2, 2}});
  std::istringstream in("reaction_id\tsynthon_ids\ttask\tvalue\n0\t0,2\ty\t1.0\n0\t1,3\ty\tabc\n");
  try {
    read_labels(in, lib);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Labels, RejectsIneligibleSynthon) {
  const auto lib = make_library({{2, 2}});
  std::istringstream in("reaction_id\tsynthon_ids\ttask\tvalue\n0\t2,0\ty\t1.0\n");
  EXPECT_THROW(read_labels(in, lib), Error);
}

TEST(SampleIndices, DistinctSortedAndSeeded) {
  const auto a = sample_indices(1000, 100, 3);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::uint64_t>(a.begin(), a.end()).size(), 100u);
  EXPECT_EQ(a, sample_indices(1000, 100, 3));
  EXPECT_NE(a, sample_indices(1000, 100, 4));
  EXPECT_EQ(sample_indices(5, 10, 0).size(), 5u);
}

}  // namespace
}  // namespace apex
