// Thompson sampling over one reaction with independent normal arms per
// (R-group position, synthon). An evaluated product's score is credited in
// full to each of its synthons' arms.

#include <algorithm>
#include <cmath>
#include <random>

#include "apex/error.hpp"
#include "apex/evalkit.hpp"

namespace apex {

namespace {

struct Arm {
  double sum = 0.0;
  std::uint64_t n = 0;
};

}  // namespace

std::size_t default_warmup(std::size_t components) { return components <= 2 ? 3 : 10; }

TsResult thompson_sampling(const CslLibrary& library, ReactionId reaction,
                           CountingObjective& objective, const TsConfig& config) {
  if (reaction >= library.reaction_count()) throw Error("reaction id out of range");
  const auto& rx = library.reactions()[reaction];
  const std::size_t c = rx.rgroups.size();
  const std::size_t w = config.warmup.value_or(default_warmup(c));
  if (w == 0) throw Error("warmup must be at least 1");
  const double sign = config.direction == Direction::maximize ? 1.0 : -1.0;

  TsResult out;
  out.reaction = reaction;
  out.warmup = w;
  std::mt19937_64 rng(config.seed);
  std::vector<std::uint32_t> digits(c);
  std::vector<std::vector<Arm>> arms(c);
  for (std::size_t p = 0; p < c; ++p) arms[p].resize(rx.rgroups[p].synthons.size());
  const std::uint64_t calls_before = objective.calls();

  auto evaluate = [&]() {
    const MultiIndex chi = library.from_digits(reaction, digits);
    const double y = objective(chi);
    out.evaluated.push_back(library.encode_index(chi).value);
    out.values.push_back(y);
    const double best = out.best_so_far.empty() ? y
                        : config.direction == Direction::maximize
                            ? std::max(out.best_so_far.back(), y)
                            : std::min(out.best_so_far.back(), y);
    out.best_so_far.push_back(best);
    return sign * y;
  };

  // Warmup: each synthon w times, other R-groups filled uniformly at random.
  std::vector<double> warm_scores;
  for (std::size_t p = 0; p < c; ++p) {
    for (std::uint32_t s = 0; s < arms[p].size(); ++s) {
      for (std::size_t rep = 0; rep < w; ++rep) {
        for (std::size_t q = 0; q < c; ++q) {
          if (q == p) continue;
          std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(arms[q].size() - 1));
          digits[q] = pick(rng);
        }
        digits[p] = s;
        const double y = evaluate();
        arms[p][s].sum += y;
        ++arms[p][s].n;
        warm_scores.push_back(y);
      }
    }
  }

  double mean = 0.0, var = 0.0;
  for (double y : warm_scores) mean += y;
  mean /= static_cast<double>(warm_scores.size());
  for (double y : warm_scores) var += (y - mean) * (y - mean);
  var = warm_scores.size() > 1 ? var / static_cast<double>(warm_scores.size() - 1) : 0.0;
  if (!(var > 0.0)) var = 1.0;
  const double mu0 = config.prior_mean.value_or(mean);
  const double var0 = config.prior_variance.value_or(var);
  const double noise = config.noise_variance.value_or(var);
  if (!(var0 > 0.0) || !(noise > 0.0)) throw Error("prior and noise variances must be positive");

  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t p = 0; p < c; ++p) {
      double best = -std::numeric_limits<double>::infinity();
      std::uint32_t best_s = 0;
      for (std::uint32_t s = 0; s < arms[p].size(); ++s) {
        const auto& arm = arms[p][s];
        const double precision = 1.0 / var0 + static_cast<double>(arm.n) / noise;
        const double post_mean = (mu0 / var0 + arm.sum / noise) / precision;
        const double draw = post_mean + unit(rng) / std::sqrt(precision);
        if (draw > best) {
          best = draw;
          best_s = s;
        }
      }
      digits[p] = best_s;
    }
    const double y = evaluate();
    for (std::size_t p = 0; p < c; ++p) {
      arms[p][digits[p]].sum += y;
      ++arms[p][digits[p]].n;
    }
  }
  out.oracle_calls = objective.calls() - calls_before;
  return out;
}

}  // namespace apex
