#pragma once

// Shared fixtures and independent reference implementations for the tests.
// The references deliberately avoid the engine's scan machinery: products are
// materialised one by one through decode_index and ranked with a full sort.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "apex/csl.hpp"
#include "apex/engine.hpp"
#include "apex/props.hpp"

namespace apex::testing {

/// One reaction per entry of `reactions`, each listing its R-group sizes.
/// Every slot gets a fresh synthon with token "<letter><id>*".
inline CslLibrary make_library(const std::vector<std::vector<std::size_t>>& reactions) {
  std::vector<SynthonRecord> synthons;
  std::vector<ReactionSpec> specs;
  RgroupId next_rgroup = 0;
  for (std::size_t t = 0; t < reactions.size(); ++t) {
    ReactionSpec rx{static_cast<ReactionId>(t), {}};
    for (std::size_t size : reactions[t]) {
      RgroupSpec rg{next_rgroup++, {}};
      for (std::size_t i = 0; i < size; ++i) {
        const auto id = static_cast<SynthonId>(synthons.size());
        synthons.push_back({id, std::string(1, static_cast<char>('a' + id % 26)) +
                                    std::to_string(id) + "*"});
        rg.synthons.push_back(id);
      }
      rx.rgroups.push_back(std::move(rg));
    }
    specs.push_back(std::move(rx));
  }
  return CslLibrary(std::move(synthons), std::move(specs));
}

/// Contribution table with seeded values. With `levels` > 0 every value is
/// drawn from that many evenly spaced points in [-1, 1], which produces many
/// exact score ties.
inline ContributionTable random_table(const CslLibrary& library, std::vector<std::string> tasks,
                                      std::uint64_t seed, int levels = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  std::uniform_int_distribution<int> level(0, std::max(levels - 1, 0));
  std::vector<float> values(tasks.size() * library.pair_count());
  for (auto& v : values) {
    v = levels > 1 ? -1.0f + 2.0f * static_cast<float>(level(rng)) / static_cast<float>(levels - 1)
                   : uni(rng);
  }
  std::vector<double> bias;
  for (std::size_t i = 0; i < tasks.size(); ++i) bias.push_back(levels > 0 ? 0.0 : uni(rng));
  return ContributionTable(library.fingerprint(), std::move(tasks), std::move(bias),
                           library.pair_count(), std::move(values));
}

/// Score recomputed straight from the table entries.
inline double reference_score(const ContributionTable& table, const CslLibrary& library,
                              const MultiIndex& chi, std::size_t task) {
  double s = 0.0;
  for (const auto& a : chi.assignment) {
    const auto pos = library.position_of(a.rgroup, a.synthon);
    s += static_cast<double>(table.value(task, library.pair_offset(a.rgroup) + *pos));
  }
  return s + table.bias()[task];
}

inline double reference_violation(const std::vector<double>& values,
                                  const std::vector<Constraint>& constraints) {
  double below = 0.0, above = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < constraints[i].lower) below += constraints[i].lower - values[i];
    if (values[i] > constraints[i].upper) above += values[i] - constraints[i].upper;
  }
  const double v = -(below + above);
  return v == 0.0 ? 0.0 : v;
}

/// Materialise every product, sort by (violation, signed objective, -g),
/// keep the first k and drop violators.
inline std::vector<ScoredCompound> brute_force_topk(const CslLibrary& library,
                                                    const ContributionTable& table,
                                                    const QuerySpec& query) {
  const auto obj = table.task_index(query.objective);
  std::vector<std::size_t> cons;
  for (const auto& c : query.constraints) cons.push_back(table.task_index(c.task));
  const double sign = query.direction == Direction::maximize ? 1.0 : -1.0;
  struct Row {
    double viol, signed_obj;
    std::uint64_t g;
  };
  std::vector<Row> rows;
  rows.reserve(library.product_count());
  for (std::uint64_t g = 0; g < library.product_count(); ++g) {
    const auto chi = library.decode_index(GlobalIndex{g});
    std::vector<double> values;
    for (auto c : cons) values.push_back(reference_score(table, library, chi, c));
    rows.push_back({reference_violation(values, query.constraints),
                    sign * reference_score(table, library, chi, obj), g});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.viol != b.viol) return a.viol > b.viol;
    if (a.signed_obj != b.signed_obj) return a.signed_obj > b.signed_obj;
    return a.g < b.g;
  });
  if (rows.size() > query.k) rows.resize(query.k);
  std::vector<ScoredCompound> out;
  for (const auto& r : rows) {
    if (r.viol < 0.0) continue;
    ScoredCompound sc;
    sc.global_index = r.g;
    sc.chi = library.decode_index(GlobalIndex{r.g});
    sc.objective = reference_score(table, library, sc.chi, obj);
    for (auto c : cons) sc.constraint_values.push_back(reference_score(table, library, sc.chi, c));
    out.push_back(std::move(sc));
  }
  return out;
}

/// Rounds every oracle latent to float so that a float contribution table
/// reproduces additive oracle values bit for bit.
inline void round_latents_to_float(GroundTruthOracle& oracle, const CslLibrary& library) {
  for (std::size_t i = 0; i < oracle.task_count(); ++i) {
    for (SynthonId s = 0; s < library.synthon_count(); ++s) {
      oracle.set_latent(i, s, static_cast<double>(static_cast<float>(oracle.latent(i, s))));
    }
  }
}

/// Contribution table equal to an additive oracle: v_{i,r,s} = latent_i(s),
/// b_i = offset_i. Call round_latents_to_float first for exact agreement.
inline ContributionTable oracle_table(const GroundTruthOracle& oracle, const CslLibrary& library) {
  std::vector<std::string> tasks = oracle.task_names();
  std::vector<double> bias;
  for (const auto& t : oracle.config().tasks) bias.push_back(t.offset);
  std::vector<float> values(tasks.size() * library.pair_count());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (RgroupId r = 0; r < library.rgroup_count(); ++r) {
      const auto& rg = library.rgroup(r);
      for (std::size_t p = 0; p < rg.synthons.size(); ++p) {
        values[i * library.pair_count() + library.pair_offset(r) + p] =
            static_cast<float>(oracle.latent(i, rg.synthons[p]));
      }
    }
  }
  return ContributionTable(library.fingerprint(), std::move(tasks), std::move(bias),
                           library.pair_count(), std::move(values));
}

inline std::string topk_text(const TopKResult& result, const QuerySpec& query,
                             const CslLibrary& library) {
  std::ostringstream out;
  write_topk(out, result, query, library);
  return out.str();
}

}  // namespace apex::testing
