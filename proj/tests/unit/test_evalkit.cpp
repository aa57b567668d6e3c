#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "apex/error.hpp"
#include "apex/evalkit.hpp"
#include "fixtures.hpp"

namespace apex {
namespace {

using testing::make_library;
using testing::oracle_table;
using testing::round_latents_to_float;

OracleConfig one_additive_task(std::uint64_t seed) {
  OracleConfig cfg;
  cfg.seed = seed;
  TaskDef t;
  t.name = "y";
  cfg.tasks.push_back(t);
  TaskDef c;
  c.name = "c";
  c.offset = 0.5;
  cfg.tasks.push_back(c);
  return cfg;
}

QuerySpec query(std::string objective, Direction dir, std::uint64_t k,
                std::vector<Constraint> cons = {}) {
  QuerySpec q;
  q.objective = std::move(objective);
  q.direction = dir;
  q.k = k;
  q.constraints = std::move(cons);
  return q;
}

TEST(OracleTopK, TinyLibraryMatchesHandSort) {
  const auto lib = make_library({{2, 3}});
  const GroundTruthOracle oracle(one_additive_task(1), lib);
  std::vector<std::pair<double, std::uint64_t>> hand;
  for (std::uint64_t g = 0; g < 6; ++g) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    hand.emplace_back(oracle.latent(0, chi.assignment[0].synthon) + oracle.latent(0, chi.assignment[1].synthon), g);
  }
  std::sort(hand.begin(), hand.end(), [](auto& a, auto& b) { return a.first < b.first; });
  const auto top = oracle_topk(lib, oracle, query("y", Direction::minimize, 3), 3);
  ASSERT_EQ(top.items.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(top.items[i].global_index, hand[i].second);
    EXPECT_EQ(top.items[i].objective, hand[i].first);
  }
  EXPECT_EQ(top.evaluated, 6u);
  EXPECT_EQ(top.feasible, 6u);
}

TEST(OracleTopK, ExcludingConstraintsGiveEmptySet) {
  const auto lib = make_library({{4, 3}});
  const GroundTruthOracle oracle(one_additive_task(2), lib);
  const auto top = oracle_topk(lib, oracle, query("y", Direction::maximize, 5, {{"c", 1e6, kInf}}), 5);
  EXPECT_TRUE(top.items.empty());
  EXPECT_EQ(top.feasible, 0u);
}

TEST(OracleTopK, GuardRejectsHugeLibraries) {
  const auto lib = make_library({{1000, 1000, 1000}});
  const GroundTruthOracle oracle(one_additive_task(3), lib);
  EXPECT_THROW(oracle_topk(lib, oracle, query("y", Direction::maximize, 5), 5), Error);
}

TEST(OracleTopK, AgreesWithEngineUnderOracleExactTable) {
  SyntheticConfig sc;
  sc.n_reactions = 6;
  sc.synthons_min = 10;
  sc.synthons_max = 40;
  const auto lib = generate_synthetic(sc, 4);
  GroundTruthOracle oracle(additive_oracle_config(5), lib);
  round_latents_to_float(oracle, lib);
  const auto table = oracle_table(oracle, lib);
  // Bounds at the library's own quantiles keep roughly a third of it feasible.
  std::vector<double> logp, mw;
  for (std::uint64_t g = 0; g < lib.product_count(); g += 7) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    logp.push_back(oracle.evaluate(chi, "logp"));
    mw.push_back(oracle.evaluate(chi, "mw"));
  }
  std::sort(logp.begin(), logp.end());
  std::sort(mw.begin(), mw.end());
  const double logp_hi = logp[logp.size() * 6 / 10];
  const double mw_lo = mw[mw.size() * 3 / 10];
  for (auto dir : {Direction::maximize, Direction::minimize}) {
    const auto q = query("dock0", dir, 200, {{"logp", -kInf, logp_hi}, {"mw", mw_lo, kInf}});
    const auto truth = oracle_topk(lib, oracle, q, 200, {2, std::nullopt});
    const auto got = search_topk_stream(lib, table, q);
    ASSERT_FALSE(truth.items.empty());
    ASSERT_EQ(got.items.size(), truth.items.size());
    for (std::size_t i = 0; i < truth.items.size(); ++i) {
      EXPECT_EQ(got.items[i].global_index, truth.items[i].global_index);
      EXPECT_EQ(got.items[i].objective, truth.items[i].objective);
    }
    EXPECT_EQ(*recall_j_at_k(truth, got), 1.0);
    EXPECT_EQ(*satisfaction_rate(got.items, oracle, q.constraints), 1.0);
  }
}

TEST(Recall, SupersetAndDisjoint) {
  std::vector<ScoredCompound> truth(4), superset(10), disjoint(3);
  for (std::uint64_t i = 0; i < 4; ++i) truth[i].global_index = i * 2;
  for (std::uint64_t i = 0; i < 10; ++i) superset[i].global_index = i;
  for (std::uint64_t i = 0; i < 3; ++i) disjoint[i].global_index = 100 + i;
  EXPECT_EQ(*recall_j_at_k(truth, superset), 1.0);
  EXPECT_EQ(*recall_j_at_k(truth, disjoint), 0.0);
  EXPECT_EQ(*recall_j_at_k(truth, std::span(superset).first(3)), 0.5);
  EXPECT_FALSE(recall_j_at_k(std::vector<ScoredCompound>{}, superset).has_value());
}

TEST(Recall, RandomSelectionMatchesAnalyticBaseline) {
  // Expected recall of k uniform picks is k / N; average over many draws.
  const std::uint64_t n = 20000, k = 200;
  std::vector<ScoredCompound> truth(50);
  for (std::uint64_t i = 0; i < 50; ++i) truth[i].global_index = i * 397;
  double sum = 0.0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    std::vector<ScoredCompound> picked;
    for (auto g : sample_indices(n, k, 1000 + t)) {
      ScoredCompound sc;
      sc.global_index = g;
      picked.push_back(sc);
    }
    sum += *recall_j_at_k(truth, picked);
  }
  EXPECT_NEAR(sum / trials, static_cast<double>(k) / n, 0.003);
}

TEST(Satisfaction, Conventions) {
  const auto lib = make_library({{4, 3}});
  const GroundTruthOracle oracle(one_additive_task(6), lib);
  std::vector<ScoredCompound> items(2);
  items[0].chi = lib.decode_index(GlobalIndex{0});
  items[1].chi = lib.decode_index(GlobalIndex{5});
  EXPECT_EQ(*satisfaction_rate(items, oracle, {}), 1.0);
  const std::vector<Constraint> cons = {{"c", -kInf, kInf}};
  EXPECT_EQ(*satisfaction_rate(items, oracle, cons), 1.0);
  EXPECT_FALSE(satisfaction_rate(std::vector<ScoredCompound>{}, oracle, cons).has_value());
  const double v0 = oracle.evaluate(items[0].chi, 1);
  const double v1 = oracle.evaluate(items[1].chi, 1);
  const std::vector<Constraint> split = {{"c", std::min(v0, v1), (v0 + v1) / 2}};
  ASSERT_NE(v0, v1);
  EXPECT_EQ(*satisfaction_rate(items, oracle, split), 0.5);
}

TEST(BaseRate, MatchesExhaustiveCount) {
  SyntheticConfig sc;
  sc.n_reactions = 4;
  sc.synthons_min = sc.synthons_max = 20;
  const auto lib = generate_synthetic(sc, 7);
  const GroundTruthOracle oracle(default_oracle_config(8), lib);
  const std::vector<Constraint> cons = {{"logp", -kInf, 1.0}, {"tpsa", 20.0, kInf}};
  std::uint64_t ok = 0;
  for (std::uint64_t g = 0; g < lib.product_count(); ++g) {
    const auto chi = lib.decode_index(GlobalIndex{g});
    const double a = oracle.evaluate(chi, "logp"), b = oracle.evaluate(chi, "tpsa");
    ok += (a <= 1.0 && b >= 20.0);
  }
  EXPECT_EQ(base_rate(lib, oracle, cons, lib.product_count(), 0),
            static_cast<double>(ok) / static_cast<double>(lib.product_count()));
  EXPECT_NEAR(base_rate(lib, oracle, cons, 5000, 3),
              static_cast<double>(ok) / static_cast<double>(lib.product_count()), 0.03);
  EXPECT_EQ(base_rate(lib, oracle, {}, 10, 0), 1.0);
}

TEST(Cdf, SingleElementAndIdenticalSets) {
  const std::vector<std::pair<std::string, std::vector<double>>> one = {{"a", {2.5}}};
  const auto rows = score_cdf_export(one);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].score, 2.5);
  EXPECT_EQ(rows[0].cumulative, 1.0);

  const std::vector<std::pair<std::string, std::vector<double>>> two = {{"x", {3.0, 1.0, 2.0}},
                                                                        {"y", {2.0, 3.0, 1.0}}};
  const auto t = score_cdf_export(two);
  ASSERT_EQ(t.size(), 6u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(t[i].score, t[i + 3].score);
    EXPECT_EQ(t[i].cumulative, t[i + 3].cumulative);
  }
  std::ostringstream out;
  write_cdf(out, t);
  EXPECT_EQ(out.str().substr(0, 23), "label\tscore\tcumulative\n");
  const std::vector<std::pair<std::string, std::vector<double>>> empty = {{"z", {}}};
  EXPECT_THROW(score_cdf_export(empty), Error);
}

// Fraction of CDF rows of `set` at or below v.
double cdf_at(const std::vector<double>& sorted, double v) {
  return static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), v) - sorted.begin()) /
         static_cast<double>(sorted.size());
}

TEST(Cdf, TopSetDominatesBackground) {
  SyntheticConfig sc;
  sc.n_reactions = 4;
  sc.synthons_min = sc.synthons_max = 25;
  const auto lib = generate_synthetic(sc, 9);
  GroundTruthOracle oracle(additive_oracle_config(10), lib);
  round_latents_to_float(oracle, lib);
  const auto table = oracle_table(oracle, lib);
  const auto q = query("dock1", Direction::maximize, 300);
  const auto top = search_topk_stream(lib, table, q);
  std::vector<double> a, b;
  for (const auto& item : top.items) a.push_back(oracle.evaluate(item.chi, "dock1"));
  for (auto g : sample_indices(lib.product_count(), 300, 11)) {
    b.push_back(oracle.evaluate(lib.decode_index(GlobalIndex{g}), "dock1"));
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Maximisation: the top set's CDF lies at or below the background's.
  for (double v : a) EXPECT_LE(cdf_at(a, v), cdf_at(b, v));
  for (double v : b) EXPECT_LE(cdf_at(a, v), cdf_at(b, v));
}

CountingObjective oracle_objective(const GroundTruthOracle& oracle, std::size_t task) {
  return CountingObjective([&oracle, task](const MultiIndex& chi) { return oracle.evaluate(chi, task); });
}

TEST(Thompson, SingleProductReaction) {
  const auto lib = make_library({{1, 1}});
  const GroundTruthOracle oracle(one_additive_task(12), lib);
  auto fn = oracle_objective(oracle, 0);
  TsConfig cfg;
  cfg.iterations = 1;
  const auto res = thompson_sampling(lib, 0, fn, cfg);
  EXPECT_EQ(res.warmup, 3u);
  EXPECT_EQ(res.oracle_calls, 2u * 3u + 1u);
  for (auto g : res.evaluated) EXPECT_EQ(g, 0u);
  EXPECT_EQ(res.best_so_far.back(), oracle.evaluate(lib.decode_index(GlobalIndex{0}), 0));
}

TEST(Thompson, BudgetIsExact) {
  const auto lib = make_library({{7, 9}, {4, 5, 6}});
  const GroundTruthOracle oracle(one_additive_task(13), lib);
  for (ReactionId t : {0u, 1u}) {
    const std::size_t synthons = t == 0 ? 16 : 15;
    const std::size_t w = t == 0 ? 3 : 10;
    for (std::size_t iters : {1, 10, 250}) {
      auto fn = oracle_objective(oracle, 0);
      TsConfig cfg;
      cfg.iterations = iters;
      cfg.seed = iters;
      const auto res = thompson_sampling(lib, t, fn, cfg);
      EXPECT_EQ(fn.calls(), synthons * w + iters);
      EXPECT_EQ(res.evaluated.size(), synthons * w + iters);
      EXPECT_EQ(res.warmup, w);
      for (auto g : res.evaluated) {
        EXPECT_GE(g, lib.reaction_offset(t));
        EXPECT_LT(g, lib.reaction_offset(t) + lib.reaction_product_count(t));
      }
    }
  }
  auto fn = oracle_objective(oracle, 0);
  TsConfig warmup_only;
  warmup_only.iterations = 0;
  const auto warm = thompson_sampling(lib, 0, fn, warmup_only);
  EXPECT_EQ(warm.oracle_calls, fn.calls());
  EXPECT_EQ(warm.oracle_calls, warm.evaluated.size());
  TsConfig bad;
  bad.warmup = 0;
  EXPECT_THROW(thompson_sampling(lib, 0, fn, bad), Error);
  EXPECT_THROW(thompson_sampling(lib, 5, fn, TsConfig{}), Error);
}

TEST(Thompson, BestFoundImprovesWithIterations) {
  const auto lib = make_library({{30, 30, 30}});
  const GroundTruthOracle oracle(additive_oracle_config(14), lib);
  const auto task = oracle.task_index("dock0");
  std::vector<double> medians;
  for (std::size_t iters : {10, 100, 1000}) {
    std::vector<double> best;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto fn = oracle_objective(oracle, task);
      TsConfig cfg;
      cfg.iterations = iters;
      cfg.direction = Direction::minimize;
      cfg.seed = seed;
      best.push_back(thompson_sampling(lib, 0, fn, cfg).best_so_far.back());
    }
    medians.push_back(quantile(best, 0.5));
  }
  EXPECT_GE(medians[0], medians[1]);
  EXPECT_GE(medians[1], medians[2]);
}

TEST(Thompson, Deterministic) {
  const auto lib = make_library({{8, 8, 8}});
  const GroundTruthOracle oracle(one_additive_task(15), lib);
  auto f1 = oracle_objective(oracle, 0);
  auto f2 = oracle_objective(oracle, 0);
  TsConfig cfg;
  cfg.seed = 3;
  EXPECT_EQ(thompson_sampling(lib, 0, f1, cfg).evaluated, thompson_sampling(lib, 0, f2, cfg).evaluated);
}

TEST(Compare, ShapeAndSaturation) {
  const auto lib = make_library({{5, 6}, {3, 3, 3}, {4, 4}});
  GroundTruthOracle oracle(additive_oracle_config(16), lib);
  round_latents_to_float(oracle, lib);
  const auto table = oracle_table(oracle, lib);
  CompareConfig cfg;
  cfg.objective = "dock0";
  cfg.direction = Direction::minimize;
  cfg.iterations = {5, 50};
  cfg.seeds = {0, 1, 2};
  cfg.js = {3, 10};
  const auto report = compare_apex_vs_ts(lib, oracle, table, cfg);
  ASSERT_EQ(report.rows.size(), 3u * 2u);
  for (const auto& row : report.rows) {
    // Budgets here exceed every reaction's size.
    EXPECT_GE(row.budget, lib.reaction_product_count(row.reaction));
    for (double r : row.apex_recall) EXPECT_EQ(r, 1.0);
    EXPECT_LE(row.ts_q1[0], row.ts_median[0]);
    EXPECT_LE(row.ts_median[0], row.ts_q3[0]);
  }
  std::ostringstream out;
  write_compare(out, report);
  EXPECT_EQ(out.str().substr(0, 16), "# seeds: 0 1 2\nr");
}

TEST(Quantile, Interpolates) {
  EXPECT_EQ(quantile({3.0, 1.0, 2.0, 4.0}, 0.5), 2.5);
  EXPECT_EQ(quantile({5.0}, 0.25), 5.0);
  EXPECT_EQ(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.25), 2.0);
  EXPECT_TRUE(std::isnan(quantile({}, 0.5)));
}

}  // namespace
}  // namespace apex
