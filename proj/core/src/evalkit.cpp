#include "apex/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <queue>
#include <unordered_set>

#include "apex/error.hpp"
#include "apex/parallel.hpp"
#include "text_util.hpp"

namespace apex {

namespace {

struct Ranked {
  double obj;  // signed: larger is better
  std::uint64_t g;
};

// Min-heap ordering: the top is the worst retained entry.
struct WorseFirst {
  bool operator()(const Ranked& a, const Ranked& b) const {
    if (a.obj != b.obj) return a.obj > b.obj;
    return a.g < b.g;
  }
};

bool ranked_better(const Ranked& a, const Ranked& b) {
  if (a.obj != b.obj) return a.obj > b.obj;
  return a.g < b.g;
}

bool satisfies(std::span<const double> values, std::span<const Constraint> constraints) {
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    if (values[i] < constraints[i].lower || values[i] > constraints[i].upper) return false;
  }
  return true;
}

}  // namespace

OracleTopK oracle_topk(const CslLibrary& library, const GroundTruthOracle& oracle,
                       const QuerySpec& query, std::uint64_t j, const OracleOptions& options) {
  validate_query(query);
  std::uint64_t begin = 0, end = library.product_count();
  if (options.range) {
    std::tie(begin, end) = *options.range;
    if (begin > end || end > library.product_count()) throw Error("oracle range out of bounds");
  }
  if (end - begin > kOracleGuard) {
    throw Error("oracle_topk would enumerate " + std::to_string(end - begin) +
                " products (limit " + std::to_string(kOracleGuard) +
                "); downsample the library first");
  }
  const auto objective = oracle.task_index(query.objective);
  std::vector<std::size_t> cons;
  for (const auto& c : query.constraints) cons.push_back(oracle.task_index(c.task));
  const double sign = query.direction == Direction::maximize ? 1.0 : -1.0;

  const std::size_t workers = resolve_threads(options.threads);
  using Heap = std::priority_queue<Ranked, std::vector<Ranked>, WorseFirst>;
  std::vector<Heap> heaps(workers);
  std::vector<std::uint64_t> feasible(workers, 0);
  parallel_for(begin, end, workers, [&](std::uint64_t b, std::uint64_t e, std::size_t w) {
    auto& heap = heaps[w];
    std::vector<double> values(cons.size());
    for (auto it = ProductStream(library, b, e).begin(); it.global_index() < e; ++it) {
      const auto& chi = *it;
      for (std::size_t i = 0; i < cons.size(); ++i) values[i] = oracle.evaluate(chi, cons[i]);
      if (!satisfies(values, query.constraints)) continue;
      ++feasible[w];
      if (j == 0) continue;
      const Ranked r{sign * oracle.evaluate(chi, objective), it.global_index()};
      if (heap.size() < j) {
        heap.push(r);
      } else if (ranked_better(r, heap.top())) {
        heap.pop();
        heap.push(r);
      }
    }
  });

  std::vector<Ranked> all;
  OracleTopK out;
  for (std::size_t w = 0; w < workers; ++w) {
    out.feasible += feasible[w];
    while (!heaps[w].empty()) {
      all.push_back(heaps[w].top());
      heaps[w].pop();
    }
  }
  std::sort(all.begin(), all.end(), ranked_better);
  if (all.size() > j) all.resize(j);
  out.evaluated = end - begin;
  for (const auto& r : all) {
    ScoredCompound sc;
    sc.global_index = r.g;
    sc.chi = library.decode_index(GlobalIndex{r.g});
    sc.objective = oracle.evaluate(sc.chi, objective);
    for (auto c : cons) sc.constraint_values.push_back(oracle.evaluate(sc.chi, c));
    sc.violation = 0.0;
    out.items.push_back(std::move(sc));
  }
  return out;
}

std::optional<double> recall_j_at_k(std::span<const ScoredCompound> truth,
                                    std::span<const ScoredCompound> retrieved) {
  if (truth.empty()) return std::nullopt;
  std::unordered_set<std::uint64_t> got;
  for (const auto& r : retrieved) got.insert(r.global_index);
  std::size_t hit = 0;
  for (const auto& t : truth) hit += got.count(t.global_index);
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::optional<double> recall_j_at_k(const OracleTopK& truth, const TopKResult& retrieved) {
  return recall_j_at_k(truth.items, retrieved.items);
}

std::optional<double> satisfaction_rate(std::span<const ScoredCompound> retrieved,
                                        const GroundTruthOracle& oracle,
                                        std::span<const Constraint> constraints) {
  if (constraints.empty()) return 1.0;
  if (retrieved.empty()) return std::nullopt;
  std::vector<std::size_t> tasks;
  for (const auto& c : constraints) tasks.push_back(oracle.task_index(c.task));
  std::vector<double> values(tasks.size());
  std::size_t ok = 0;
  for (const auto& r : retrieved) {
    for (std::size_t i = 0; i < tasks.size(); ++i) values[i] = oracle.evaluate(r.chi, tasks[i]);
    ok += satisfies(values, constraints) ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(retrieved.size());
}

double base_rate(const CslLibrary& library, const GroundTruthOracle& oracle,
                 std::span<const Constraint> constraints, std::uint64_t sample_size,
                 std::uint64_t seed) {
  const std::uint64_t n = library.product_count();
  if (n == 0) return 0.0;
  if (constraints.empty()) return 1.0;
  std::vector<std::size_t> tasks;
  for (const auto& c : constraints) tasks.push_back(oracle.task_index(c.task));
  std::vector<double> values(tasks.size());
  std::uint64_t ok = 0, total = 0;
  auto visit = [&](const MultiIndex& chi) {
    for (std::size_t i = 0; i < tasks.size(); ++i) values[i] = oracle.evaluate(chi, tasks[i]);
    ok += satisfies(values, constraints) ? 1 : 0;
    ++total;
  };
  if (sample_size >= n) {
    for (const auto& chi : ProductStream(library, 0, n)) visit(chi);
  } else {
    for (auto g : sample_indices(n, sample_size, seed)) visit(library.decode_index(GlobalIndex{g}));
  }
  return total == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(total);
}

std::vector<CdfRow> score_cdf_export(
    std::span<const std::pair<std::string, std::vector<double>>> sets) {
  std::vector<CdfRow> rows;
  for (const auto& [label, scores] : sets) {
    if (scores.empty()) throw Error("score set '" + label + "' is empty");
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      rows.push_back({label, sorted[i], static_cast<double>(i + 1) / n});
    }
  }
  return rows;
}

void write_cdf(std::ostream& out, std::span<const CdfRow> rows) {
  out << "label\tscore\tcumulative\n";
  for (const auto& r : rows) {
    out << r.label << '\t' << text::format_double(r.score) << '\t'
        << text::format_double(r.cumulative) << '\n';
  }
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

CompareReport compare_apex_vs_ts(const CslLibrary& library, const GroundTruthOracle& oracle,
                                 const ContributionTable& table, const CompareConfig& config) {
  if (config.seeds.empty()) throw Error("compare needs at least one seed");
  if (config.iterations.empty()) throw Error("compare needs at least one iteration count");
  const auto objective = oracle.task_index(config.objective);
  table.task_index(config.objective);
  std::vector<ReactionId> reactions = config.reactions;
  if (reactions.empty()) {
    for (ReactionId t = 0; t < library.reaction_count(); ++t) reactions.push_back(t);
  }
  const std::uint64_t max_j =
      config.js.empty() ? 0 : *std::max_element(config.js.begin(), config.js.end());

  CompareReport report;
  report.js = config.js;
  report.seeds = config.seeds;
  for (auto t : reactions) {
    if (t >= library.reaction_count()) throw Error("reaction id out of range");
    const auto range = std::make_pair(library.reaction_offset(t),
                                      library.reaction_offset(t) + library.reaction_product_count(t));
    QuerySpec query;
    query.objective = config.objective;
    query.direction = config.direction;
    query.k = max_j;
    const auto truth = oracle_topk(library, oracle, query, max_j, {config.threads, range});
    auto truth_j = [&](std::uint64_t j) {
      return std::span<const ScoredCompound>(truth.items.data(),
                                             std::min<std::size_t>(j, truth.items.size()));
    };

    std::size_t n_synthons = 0;
    for (const auto& rg : library.reactions()[t].rgroups) n_synthons += rg.synthons.size();
    const std::size_t w = default_warmup(library.reactions()[t].rgroups.size());

    for (auto iters : config.iterations) {
      CompareRow row;
      row.reaction = t;
      row.iterations = iters;
      row.budget = n_synthons * w + iters;

      query.k = row.budget;
      const auto apex = search_topk_stream(library, table, query, {config.threads, range});
      for (auto j : config.js) row.apex_recall.push_back(recall_j_at_k(truth_j(j), apex.items).value_or(0.0));

      std::vector<std::vector<double>> ts_recall(config.js.size());
      for (auto seed : config.seeds) {
        TsConfig ts;
        ts.iterations = iters;
        ts.direction = config.direction;
        ts.seed = seed;
        CountingObjective fn([&](const MultiIndex& chi) { return oracle.evaluate(chi, objective); });
        const auto res = thompson_sampling(library, t, fn, ts);
        std::unordered_set<std::uint64_t> seen(res.evaluated.begin(), res.evaluated.end());
        for (std::size_t ji = 0; ji < config.js.size(); ++ji) {
          const auto tj = truth_j(config.js[ji]);
          std::size_t hit = 0;
          for (const auto& c : tj) hit += seen.count(c.global_index);
          ts_recall[ji].push_back(tj.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(tj.size()));
        }
      }
      for (auto& r : ts_recall) {
        row.ts_median.push_back(quantile(r, 0.5));
        row.ts_q1.push_back(quantile(r, 0.25));
        row.ts_q3.push_back(quantile(r, 0.75));
      }
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

void write_compare(std::ostream& out, const CompareReport& report) {
  out << "# seeds:";
  for (auto s : report.seeds) out << ' ' << s;
  out << '\n';
  out << "reaction_id\titerations\tbudget";
  for (auto j : report.js) {
    out << "\tapex_recall_" << j << "\tts_median_" << j << "\tts_q1_" << j << "\tts_q3_" << j;
  }
  out << '\n';
  for (const auto& row : report.rows) {
    out << row.reaction << '\t' << row.iterations << '\t' << row.budget;
    for (std::size_t i = 0; i < report.js.size(); ++i) {
      out << '\t' << text::format_double(row.apex_recall[i]) << '\t'
          << text::format_double(row.ts_median[i]) << '\t' << text::format_double(row.ts_q1[i])
          << '\t' << text::format_double(row.ts_q3[i]);
    }
    out << '\n';
  }
}

}  // namespace apex
