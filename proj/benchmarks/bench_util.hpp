#pragma once

#include <random>
#include <string>
#include <vector>

#include "apex/csl.hpp"
#include "apex/engine.hpp"

namespace apex::bench {

// One reaction with `components` R-groups of `per_rgroup` synthons each.
inline CslLibrary single_reaction(std::size_t components, std::size_t per_rgroup) {
  SyntheticConfig sc;
  sc.n_reactions = 1;
  sc.components = components == 2 ? SyntheticConfig::Components::two : SyntheticConfig::Components::three;
  sc.synthons_min = sc.synthons_max = per_rgroup;
  return generate_synthetic(sc, 1);
}

inline ContributionTable uniform_table(const CslLibrary& library, std::vector<std::string> tasks,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  std::vector<float> values(tasks.size() * library.pair_count());
  for (auto& v : values) v = uni(rng);
  std::vector<double> bias(tasks.size(), 0.0);
  return ContributionTable(library.fingerprint(), std::move(tasks), std::move(bias), library.pair_count(),
                           std::move(values));
}

}  // namespace apex::bench
