#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "apex/csl.hpp"
#include "apex/engine.hpp"
#include "apex/error.hpp"
#include "apex/evalkit.hpp"
#include "apex/factorizer.hpp"
#include "apex/props.hpp"
#include "apex/surrogate.hpp"
#include "query_file.hpp"

namespace apex::cli {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  return out;
}

// Flags shared by several subcommands. Every option a subcommand registers
// writes into this one struct; the dispatcher reads what it needs.
struct Options {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::string library, out, labels, surrogate, factorizer, table, oracle, query, results;
  std::string cache_out, save_oracle, cdf_out;

  // generate
  std::size_t reactions = 10;
  std::string components = "mixed";
  std::size_t synthons_min = 10, synthons_max = 10;
  std::size_t alphabet = 8;
  double share_rate = 0.0;
  std::string from;
  double fraction = 1.0;

  // label
  std::string oracle_kind = "default";
  std::vector<std::string> tasks;
  std::uint64_t samples = 10000;
  bool full = false;

  // features (label, train-surrogate)
  std::size_t feature_dim = 64, cross_terms = 16, max_ngram = 3;

  // train-surrogate
  std::string encoder = "mlp", activation = "silu";
  std::size_t embedding_dim = 64;
  std::vector<std::size_t> hidden = {128, 128};
  std::size_t epochs = 40, batch_size = 128;
  double lr = 2e-3, final_lr = 2e-5;
  std::optional<double> sigma;
  double noise_scale = 0.1;
  std::size_t noise_draws = 1;
  double validation_fraction = 0.1;

  // train-factorizer
  std::size_t synthon_dim = 64, rgroup_dim = 64, reaction_dim = 64, value_dim = 32, fhidden = 64;
  std::size_t steps = 3000, fbatch = 256;
  double flr = 2e-3, ffinal_lr = 1e-5;
  std::string sampling = "product";
  std::size_t refine_rounds = 2, refine_samples = 8192, gap_samples = 0, log_every = 0;

  // search / evaluate / compare-ts
  std::string objective, direction;
  std::vector<std::string> preset;
  std::optional<std::uint64_t> k;
  std::string variant;
  std::optional<std::uint64_t> chunk_size;
  bool with_product = false;
  std::vector<std::uint64_t> js = {10, 100};
  std::uint64_t base_rate_samples = 100000;
  std::vector<std::size_t> iterations = {100, 1000, 10000};
  std::size_t n_seeds = 20;
  std::vector<ReactionId> reaction_ids;
  std::size_t largest = 0;

  // cost
  std::vector<std::size_t> sizes;
  std::uint64_t d = 64;
  std::uint64_t cost_tasks = 1;
};

// ---------------------------------------------------------------------------

void cmd_generate(const Options& o, std::ostream& out) {
  CslLibrary lib;
  if (!o.from.empty()) {
    lib = downsample(load_library(o.from), o.fraction, o.seed);
  } else {
    SyntheticConfig cfg;
    cfg.n_reactions = o.reactions;
    if (o.components == "two") {
      cfg.components = SyntheticConfig::Components::two;
    } else if (o.components == "three") {
      cfg.components = SyntheticConfig::Components::three;
    } else if (o.components == "mixed") {
      cfg.components = SyntheticConfig::Components::mixed;
    } else {
      throw Error("--components must be two, three or mixed");
    }
    cfg.synthons_min = o.synthons_min;
    cfg.synthons_max = std::max(o.synthons_min, o.synthons_max);
    cfg.alphabet_size = o.alphabet;
    cfg.share_rate = o.share_rate;
    lib = generate_synthetic(cfg, o.seed);
  }
  save_library(lib, o.out);
  out << "reactions " << lib.reaction_count() << "\nrgroups " << lib.rgroup_count()
      << "\nsynthons " << lib.synthon_count() << "\nproducts " << lib.product_count() << '\n';
}

OracleConfig oracle_from_options(const Options& o) {
  if (!o.oracle.empty()) return load_oracle_config(o.oracle);
  OracleConfig cfg;
  if (o.oracle_kind == "default") {
    cfg = default_oracle_config(o.seed);
  } else if (o.oracle_kind == "additive") {
    cfg = additive_oracle_config(o.seed);
  } else {
    throw Error("--oracle-kind must be default or additive");
  }
  cfg.features.dim = o.feature_dim;
  cfg.features.cross_terms = o.cross_terms;
  cfg.features.max_ngram = o.max_ngram;
  return cfg;
}

void cmd_label(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const auto cfg = oracle_from_options(o);
  if (!o.save_oracle.empty()) save_oracle_config(cfg, o.save_oracle);
  const GroundTruthOracle oracle(cfg, lib);
  const auto tasks = o.tasks.empty() ? oracle.task_names() : o.tasks;
  SampleSpec sample;
  sample.full = o.full;
  sample.size = o.samples;
  sample.seed = o.seed;
  const auto data = label_library(oracle, lib, tasks, sample);
  save_labels(data, o.labels);
  out << "rows " << data.rows.size() << "\ntasks " << tasks.size() << '\n';
}

void cmd_train_surrogate(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const auto data = load_labels(o.labels, lib);
  SurrogateConfig mc;
  mc.embedding_dim = o.embedding_dim;
  mc.hidden = o.hidden;
  mc.activation = nn::activation_from_string(o.activation);
  if (o.encoder == "mlp") {
    mc.kind = EncoderKind::mlp;
  } else if (o.encoder == "linear") {
    mc.kind = EncoderKind::linear;
  } else {
    throw Error("--encoder must be mlp or linear");
  }
  FeatureConfig fc;
  fc.dim = o.feature_dim;
  fc.cross_terms = o.cross_terms;
  fc.max_ngram = o.max_ngram;
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.lr;
  tc.final_learning_rate = o.final_lr;
  tc.seed = o.seed;
  tc.noise.sigma = o.sigma;
  tc.noise.relative_scale = o.noise_scale;
  tc.noise.draws = o.noise_draws;
  tc.validation_fraction = o.validation_fraction;
  TrainReport report;
  const auto model = train_surrogate(data, lib, mc, fc, tc, &report);
  save_surrogate(model, o.out);
  out << "sigma " << fmt(report.sigma) << "\nbest_epoch " << report.best_epoch
      << "\nbest_validation_loss " << fmt(report.best_validation_loss) << '\n';
  for (const auto& e : evaluate_r2(model, data, lib)) {
    out << "r2 " << e.task << ' ' << (e.r2 ? fmt(*e.r2) : "nan") << '\n';
  }
}

void cmd_train_factorizer(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const auto sur = load_surrogate(o.surrogate);
  FactorizerConfig fc;
  fc.synthon_dim = o.synthon_dim;
  fc.rgroup_dim = o.rgroup_dim;
  fc.reaction_dim = o.reaction_dim;
  fc.value_dim = o.value_dim;
  fc.hidden = o.fhidden;
  fc.embedding_dim = sur.embedding_dim();
  fc.activation = nn::activation_from_string(o.activation);
  FactorizerTrainConfig tc;
  tc.steps = o.steps;
  tc.batch_size = o.fbatch;
  tc.learning_rate = o.flr;
  tc.final_learning_rate = o.ffinal_lr;
  tc.seed = o.seed;
  tc.log_every = o.log_every;
  tc.refine_rounds = o.refine_rounds;
  tc.refine_samples = o.refine_samples;
  if (o.sampling == "product") {
    tc.sampling = FactorizerTrainConfig::Sampling::uniform_product;
  } else if (o.sampling == "reaction") {
    tc.sampling = FactorizerTrainConfig::Sampling::uniform_reaction;
  } else {
    throw Error("--sampling must be product or reaction");
  }
  FactorizerTrainReport report;
  const auto f = train_factorizer(lib, sur, fc, sur.feature_config(), tc, &report);
  save_factorizer(f, o.out);
  for (const auto& [step, loss] : report.loss) out << "loss " << step << ' ' << fmt(loss) << '\n';
  for (double l : report.refine_loss) out << "refine_loss " << fmt(l) << '\n';
  if (o.gap_samples > 0) {
    const auto gap = factorization_gap(f, sur, lib, o.gap_samples, o.seed);
    out << "gap_mean " << fmt(gap.mean) << "\ngap_p95 " << fmt(gap.p95) << "\ngap_max "
        << fmt(gap.max) << "\nembedding_rms " << fmt(gap.embedding_rms) << '\n';
  }
  if (!o.cache_out.empty()) save_cache(encode_hierarchy(f, lib), lib, o.cache_out);
}

void cmd_precompute(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const auto sur = load_surrogate(o.surrogate);
  const auto f = load_factorizer(o.factorizer);
  const auto cache = encode_hierarchy(f, lib);
  if (!o.cache_out.empty()) save_cache(cache, lib, o.cache_out);
  PrecomputeReport report;
  const auto table = precompute_contributions(cache, lib, sur, &report);
  save_table(table, lib, o.out);
  out << "pair_rows " << report.pair_rows << "\nembedding_dim " << report.embedding_dim
      << "\nflops_per_task " << report.flops_per_task << "\ntasks " << table.task_count()
      << "\nsynthon_encoder_evaluations " << cache.synthon_encoder_evaluations << '\n';
}

// Query from --query plus command-line overrides.
QueryFile query_from_options(const Options& o, const ContributionTable* table) {
  QueryFile q;
  if (!o.query.empty()) {
    q = load_query_file(o.query, nullptr);
  } else if (o.objective.empty()) {
    throw Error("either --query or --objective is required");
  }
  if (!o.objective.empty()) q.query.objective = o.objective;
  if (!o.direction.empty()) q.query.direction = direction_from_string(o.direction);
  for (const auto& p : o.preset) {
    for (auto& c : preset_constraints(p)) q.query.constraints.push_back(c);
  }
  if (o.k) q.query.k = *o.k;
  if (!o.variant.empty()) q.variant = variant_from_string(o.variant);
  if (o.chunk_size) {
    if (*o.chunk_size == 0) throw Error("--chunk-size must be positive");
    q.chunk_size = *o.chunk_size;
  }
  validate_query(q.query, table);
  return q;
}

void cmd_search(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const auto table = load_table(o.table);
  table.check_library(lib);
  const auto q = query_from_options(o, &table);
  const auto start = std::chrono::steady_clock::now();
  const TopKResult res =
      q.variant == EngineVariant::stream
          ? search_topk_stream(lib, table, q.query, {o.threads, std::nullopt})
          : search_topk_batched(lib, table, q.query, {q.chunk_size, o.threads});
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_topk(res, q.query, lib, o.out, o.with_product);
  out << "variant " << to_string(q.variant) << "\nk " << q.query.k << "\nscanned " << res.scanned
      << "\nretained " << res.items.size() << "\ndiscarded " << res.discarded << "\nwall_seconds "
      << fmt(wall) << '\n';
}

void cmd_evaluate(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const GroundTruthOracle oracle(load_oracle_config(o.oracle), lib);
  const auto q = query_from_options(o, nullptr);
  const auto indices = read_result_indices(o.results);
  std::vector<ScoredCompound> retrieved;
  for (auto g : indices) {
    if (g >= lib.product_count()) throw Error("result index out of range for this library");
    ScoredCompound sc;
    sc.global_index = g;
    sc.chi = lib.decode_index(GlobalIndex{g});
    retrieved.push_back(std::move(sc));
  }
  const std::uint64_t max_j = o.js.empty() ? 0 : *std::max_element(o.js.begin(), o.js.end());
  const auto truth = oracle_topk(lib, oracle, q.query, max_j, {o.threads, std::nullopt});

  auto report = open_out(o.out);
  report << "metric\tvalue\n";
  report << "products\t" << lib.product_count() << '\n';
  report << "retrieved\t" << retrieved.size() << '\n';
  report << "oracle_feasible\t" << truth.feasible << '\n';
  for (auto j : o.js) {
    const auto n = std::min<std::size_t>(j, truth.items.size());
    const auto r = recall_j_at_k(std::span(truth.items.data(), n), retrieved);
    report << "recall_" << j << "_at_" << retrieved.size() << '\t' << (r ? fmt(*r) : "nan") << '\n';
  }
  const auto sat = satisfaction_rate(retrieved, oracle, q.query.constraints);
  report << "satisfaction_rate\t" << (sat ? fmt(*sat) : "nan") << '\n';
  report << "base_rate\t"
         << fmt(base_rate(lib, oracle, q.query.constraints, o.base_rate_samples, o.seed)) << '\n';
  report << "random_recall_baseline\t"
         << fmt(lib.product_count() == 0 ? 0.0
                                         : static_cast<double>(retrieved.size()) /
                                               static_cast<double>(lib.product_count()))
         << '\n';
  report.close();

  if (!o.cdf_out.empty()) {
    // Oracle objective of the retrieved set against an equally sized uniform
    // sample of the library.
    const auto task = oracle.task_index(q.query.objective);
    std::vector<std::pair<std::string, std::vector<double>>> sets(2);
    sets[0].first = "retrieved";
    for (const auto& r : retrieved) sets[0].second.push_back(oracle.evaluate(r.chi, task));
    sets[1].first = "random";
    for (auto g : sample_indices(lib.product_count(), std::max<std::size_t>(1, retrieved.size()), o.seed)) {
      sets[1].second.push_back(oracle.evaluate(lib.decode_index(GlobalIndex{g}), task));
    }
    if (sets[0].second.empty()) sets.erase(sets.begin());
    auto cdf = open_out(o.cdf_out);
    write_cdf(cdf, score_cdf_export(sets));
  }
  out << "report " << o.out << '\n';
}

void cmd_compare_ts(const Options& o, std::ostream& out) {
  const auto lib = load_library(o.library);
  const GroundTruthOracle oracle(load_oracle_config(o.oracle), lib);
  const auto table = load_table(o.table);
  table.check_library(lib);
  if (o.objective.empty()) throw Error("--objective is required");
  CompareConfig cfg;
  cfg.objective = o.objective;
  if (!o.direction.empty()) cfg.direction = direction_from_string(o.direction);
  cfg.iterations = o.iterations;
  for (std::size_t i = 0; i < o.n_seeds; ++i) cfg.seeds.push_back(o.seed + i);
  cfg.js = o.js;
  cfg.threads = o.threads;
  cfg.reactions = o.reaction_ids;
  if (cfg.reactions.empty() && o.largest > 0) {
    std::vector<ReactionId> ids(lib.reaction_count());
    std::iota(ids.begin(), ids.end(), ReactionId{0});
    std::stable_sort(ids.begin(), ids.end(), [&](ReactionId a, ReactionId b) {
      return lib.reaction_product_count(a) > lib.reaction_product_count(b);
    });
    ids.resize(std::min(o.largest, ids.size()));
    std::sort(ids.begin(), ids.end());
    cfg.reactions = ids;
  }
  const auto report = compare_apex_vs_ts(lib, oracle, table, cfg);
  auto f = open_out(o.out);
  write_compare(f, report);
  out << "rows " << report.rows.size() << '\n';
}

void cmd_cost(const Options& o, std::ostream& out) {
  CslLibrary lib;
  if (!o.library.empty()) {
    lib = load_library(o.library);
  } else if (!o.sizes.empty()) {
    std::vector<SynthonRecord> synthons;
    ReactionSpec rx;
    for (std::size_t p = 0; p < o.sizes.size(); ++p) {
      RgroupSpec rg{static_cast<RgroupId>(p), {}};
      for (std::size_t i = 0; i < o.sizes[p]; ++i) {
        const auto id = static_cast<SynthonId>(synthons.size());
        synthons.push_back({id, "s" + std::to_string(id)});
        rg.synthons.push_back(id);
      }
      rx.rgroups.push_back(std::move(rg));
    }
    lib = CslLibrary(std::move(synthons), {rx});
  } else {
    throw Error("either --library or --sizes is required");
  }
  const auto c = cost_estimate(lib, o.d, o.k.value_or(100), o.cost_tasks);
  out << "products " << c.products << "\nsynthon_encoder_evaluations "
      << c.synthon_encoder_evaluations << "\nrows_no_sharing " << c.rows_no_sharing
      << "\nrows_actual " << c.rows_actual << "\ncache_bytes_no_sharing " << c.cache_bytes_no_sharing
      << "\ncache_bytes_actual " << c.cache_bytes_actual << "\nprecompute_flops_no_sharing "
      << c.precompute_flops_no_sharing << "\nprecompute_flops_actual " << c.precompute_flops_actual
      << "\nscoring_flops_per_task " << c.scoring_flops_per_task << "\nscoring_flops_total "
      << c.scoring_flops_total << "\ntable_bytes_actual " << c.table_bytes_actual
      << "\nqueue_entries " << c.queue_entries << '\n';
}

}  // namespace

std::vector<std::uint64_t> read_result_indices(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open result file '" + path + "'");
  std::vector<std::uint64_t> out;
  std::string line;
  std::size_t column = std::string::npos;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (column == std::string::npos) {
      const auto it = std::find(fields.begin(), fields.end(), "global_index");
      if (it == fields.end()) throw Error(path + ": no global_index column in header");
      column = static_cast<std::size_t>(it - fields.begin());
      continue;
    }
    std::uint64_t g = 0;
    const auto& f = column < fields.size() ? fields[column] : std::string();
    auto res = std::from_chars(f.data(), f.data() + f.size(), g);
    if (f.empty() || res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
      throw Error(path + ":" + std::to_string(lineno) + ": bad global_index");
    }
    out.push_back(g);
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Exhaustive constrained top-k retrieval over combinatorial synthesis libraries"};
  app.name(args.empty() ? "apex" : args.front());
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "Seed for every random choice");
  app.add_option("--threads", o.threads, "Worker threads (0: hardware concurrency)");

  auto* gen = app.add_subcommand("generate", "Write a synthetic library or downsample one");
  gen->add_option("--out", o.out, "Library file to write")->required();
  gen->add_option("--reactions", o.reactions, "Number of reactions");
  gen->add_option("--components", o.components, "two, three or mixed");
  gen->add_option("--synthons-min", o.synthons_min, "Fewest synthons per R-group");
  gen->add_option("--synthons-max", o.synthons_max, "Most synthons per R-group");
  gen->add_option("--alphabet", o.alphabet, "Token alphabet size");
  gen->add_option("--share-rate", o.share_rate, "Probability a slot reuses a synthon");
  gen->add_option("--from", o.from, "Downsample this library instead")->check(CLI::ExistingFile);
  gen->add_option("--fraction", o.fraction, "Per-reaction product fraction kept by --from");

  auto add_features = [&](CLI::App* sub) {
    sub->add_option("--feature-dim", o.feature_dim, "Hashed n-gram buckets per synthon");
    sub->add_option("--cross-terms", o.cross_terms, "Cross-product projections per product");
    sub->add_option("--max-ngram", o.max_ngram, "Longest token n-gram");
  };

  auto* label = app.add_subcommand("label", "Label a sample of products with the oracle");
  label->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  label->add_option("--out", o.labels, "Labels file to write")->required();
  label->add_option("--oracle", o.oracle, "Oracle config (JSON)")->check(CLI::ExistingFile);
  label->add_option("--oracle-kind", o.oracle_kind, "default or additive, when --oracle is absent");
  label->add_option("--save-oracle", o.save_oracle, "Write the oracle config used");
  label->add_option("--tasks", o.tasks, "Tasks to label (default: all)")->delimiter(',');
  label->add_option("--samples", o.samples, "Distinct products to label");
  label->add_flag("--full", o.full, "Label every product");
  add_features(label);

  auto* ts = app.add_subcommand("train-surrogate", "Train the multi-task surrogate");
  ts->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  ts->add_option("--labels", o.labels)->required()->check(CLI::ExistingFile);
  ts->add_option("--out", o.out, "Model file to write")->required();
  ts->add_option("--encoder", o.encoder, "mlp or linear");
  ts->add_option("--embedding-dim", o.embedding_dim);
  ts->add_option("--hidden", o.hidden, "Hidden widths, comma separated")->delimiter(',');
  ts->add_option("--activation", o.activation, "identity, tanh or silu");
  ts->add_option("--epochs", o.epochs);
  ts->add_option("--batch-size", o.batch_size);
  ts->add_option("--lr", o.lr);
  ts->add_option("--final-lr", o.final_lr);
  ts->add_option("--sigma", o.sigma, "Absolute embedding noise (default: relative)");
  ts->add_option("--noise-scale", o.noise_scale, "Noise relative to the initial embedding RMS");
  ts->add_option("--noise-draws", o.noise_draws);
  ts->add_option("--validation-fraction", o.validation_fraction);
  add_features(ts);

  auto* tf = app.add_subcommand("train-factorizer", "Distil the surrogate encoder into a factorizer");
  tf->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  tf->add_option("--surrogate", o.surrogate)->required()->check(CLI::ExistingFile);
  tf->add_option("--out", o.out, "Factorizer file to write")->required();
  tf->add_option("--cache-out", o.cache_out, "Also write the hierarchy cache");
  tf->add_option("--synthon-dim", o.synthon_dim);
  tf->add_option("--rgroup-dim", o.rgroup_dim);
  tf->add_option("--reaction-dim", o.reaction_dim);
  tf->add_option("--value-dim", o.value_dim);
  tf->add_option("--hidden", o.fhidden);
  tf->add_option("--activation", o.activation);
  tf->add_option("--steps", o.steps);
  tf->add_option("--batch-size", o.fbatch);
  tf->add_option("--lr", o.flr);
  tf->add_option("--final-lr", o.ffinal_lr);
  tf->add_option("--sampling", o.sampling, "product or reaction");
  tf->add_option("--refine-rounds", o.refine_rounds);
  tf->add_option("--refine-samples", o.refine_samples);
  tf->add_option("--gap-samples", o.gap_samples, "Report the factorization gap on this many products");
  tf->add_option("--log-every", o.log_every);

  auto* pre = app.add_subcommand("precompute", "Build the contribution table");
  pre->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  pre->add_option("--surrogate", o.surrogate)->required()->check(CLI::ExistingFile);
  pre->add_option("--factorizer", o.factorizer)->required()->check(CLI::ExistingFile);
  pre->add_option("--out", o.out, "Table file to write")->required();
  pre->add_option("--cache-out", o.cache_out, "Also write the hierarchy cache");

  auto add_query = [&](CLI::App* sub) {
    sub->add_option("--query", o.query, "Query file (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--objective", o.objective, "Objective task (overrides the query file)");
    sub->add_option("--direction", o.direction, "max or min");
    sub->add_option("--preset", o.preset, "Constraint preset: lipinski, veber, pfizer_3_75, astex_ro3");
    sub->add_option("--k", o.k, "Queue size");
  };

  auto* search = app.add_subcommand("search", "Exhaustive constrained top-k retrieval");
  search->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  search->add_option("--table", o.table)->required()->check(CLI::ExistingFile);
  search->add_option("--out", o.out, "Result file to write")->required();
  add_query(search);
  search->add_option("--variant", o.variant, "stream or batched");
  search->add_option("--chunk-size", o.chunk_size, "Batch size for the batched variant");
  search->add_flag("--with-product", o.with_product, "Add the assembled product column");

  auto* eval = app.add_subcommand("evaluate", "Recall and constraint satisfaction against the oracle");
  eval->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  eval->add_option("--oracle", o.oracle)->required()->check(CLI::ExistingFile);
  eval->add_option("--results", o.results, "Search result file")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", o.out, "Report file to write")->required();
  add_query(eval);
  eval->add_option("--j", o.js, "Truth set sizes, comma separated")->delimiter(',');
  eval->add_option("--base-rate-samples", o.base_rate_samples);
  eval->add_option("--cdf-out", o.cdf_out, "Also write oracle score CDFs");

  auto* cmp = app.add_subcommand("compare-ts", "APEX against Thompson sampling at matched budgets");
  cmp->add_option("--library", o.library)->required()->check(CLI::ExistingFile);
  cmp->add_option("--oracle", o.oracle)->required()->check(CLI::ExistingFile);
  cmp->add_option("--table", o.table)->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", o.out, "Report file to write")->required();
  cmp->add_option("--objective", o.objective)->required();
  cmp->add_option("--direction", o.direction, "max or min");
  cmp->add_option("--iterations", o.iterations, "TS iterations, comma separated")->delimiter(',');
  cmp->add_option("--seeds", o.n_seeds, "TS runs per configuration (seeds seed..seed+n-1)");
  cmp->add_option("--j", o.js, "Truth set sizes, comma separated")->delimiter(',');
  cmp->add_option("--reactions", o.reaction_ids, "Reaction ids, comma separated")->delimiter(',');
  cmp->add_option("--largest", o.largest, "Use the n reactions with the most products");

  auto* cost = app.add_subcommand("cost", "Memory and FLOP accounting");
  cost->add_option("--library", o.library)->check(CLI::ExistingFile);
  cost->add_option("--sizes", o.sizes, "R-group sizes of a single reaction, comma separated")
      ->delimiter(',');
  cost->add_option("--d", o.d, "Embedding dimension");
  cost->add_option("--k", o.k, "Queue size");
  cost->add_option("--tasks", o.cost_tasks, "Number of tasks");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) cmd_generate(o, out);
    else if (*label) cmd_label(o, out);
    else if (*ts) cmd_train_surrogate(o, out);
    else if (*tf) cmd_train_factorizer(o, out);
    else if (*pre) cmd_precompute(o, out);
    else if (*search) cmd_search(o, out);
    else if (*eval) cmd_evaluate(o, out);
    else if (*cmp) cmd_compare_ts(o, out);
    else if (*cost) cmd_cost(o, out);
  } catch (const std::exception& e) {
    err << app.get_name() << ": error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace apex::cli
