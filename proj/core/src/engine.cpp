#include "apex/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

#include "apex/error.hpp"
#include "apex/parallel.hpp"
#include "text_util.hpp"

namespace apex {

// ---------------------------------------------------------------------------
// Contribution table

ContributionTable::ContributionTable(std::uint64_t library_fingerprint,
                                     std::vector<std::string> tasks, std::vector<double> bias,
                                     std::size_t pair_rows, std::vector<float> values)
    : fingerprint_(library_fingerprint),
      tasks_(std::move(tasks)),
      bias_(std::move(bias)),
      pair_rows_(pair_rows),
      values_(std::move(values)) {
  if (bias_.size() != tasks_.size()) throw Error("contribution table: one bias per task required");
  if (values_.size() != tasks_.size() * pair_rows_) {
    throw Error("contribution table: value count does not match tasks x rows");
  }
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (tasks_[i] == tasks_[j]) throw Error("contribution table: duplicate task '" + tasks_[i] + "'");
    }
    if (!std::isfinite(bias_[i])) throw Error("contribution table: non-finite bias");
  }
  for (float v : values_) {
    if (!std::isfinite(v)) throw Error("contribution table: non-finite contribution");
  }
}

std::optional<std::size_t> ContributionTable::find_task(std::string_view name) const {
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t ContributionTable::task_index(std::string_view name) const {
  if (auto i = find_task(name)) return *i;
  throw Error("contribution table has no task '" + std::string(name) + "'");
}

void ContributionTable::check_library(const CslLibrary& library) const {
  if (fingerprint_ != library.fingerprint() || pair_rows_ != library.pair_count()) {
    throw Error("contribution table was built for a different library (fingerprint mismatch)");
  }
}

ContributionTable precompute_contributions(const HierarchyCache& cache, const CslLibrary& library,
                                           const SurrogateModel& surrogate,
                                           PrecomputeReport* report) {
  if (cache.library_fingerprint != library.fingerprint() ||
      cache.pair_rows() != library.pair_count()) {
    throw Error("hierarchy cache was built for a different library (fingerprint mismatch)");
  }
  const auto d = cache.embedding_dim();
  if (d != surrogate.embedding_dim()) {
    throw Error("cache embedding dimension " + std::to_string(d) + " does not match the heads' " +
                std::to_string(surrogate.embedding_dim()));
  }
  const std::size_t rows = cache.pair_rows();
  const std::size_t n_tasks = surrogate.task_count();
  std::vector<float> values(n_tasks * rows);
  std::vector<double> bias(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) {
    const auto ti = static_cast<Eigen::Index>(i);
    bias[i] = surrogate.head_bias(ti, 0);
    for (std::size_t row = 0; row < rows; ++row) {
      const auto col = cache.associative.col(static_cast<Eigen::Index>(row));
      double dot = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const auto ai = static_cast<Eigen::Index>(a);
        dot += surrogate.head_weights(ti, ai) * col(ai);
      }
      values[i * rows + row] = static_cast<float>(dot);
    }
  }
  if (report) {
    report->pair_rows = rows;
    report->embedding_dim = d;
    report->flops_per_task = precompute_flops(rows, d);
  }
  return ContributionTable(library.fingerprint(), surrogate.tasks(), std::move(bias), rows,
                           std::move(values));
}

double apex_score(const ContributionTable& table, const CslLibrary& library, const MultiIndex& chi,
                  std::size_t task) {
  if (task >= table.task_count()) throw Error("task index out of range");
  if (chi.reaction >= library.reaction_count()) throw Error("reaction id out of range");
  const auto& rx = library.reactions()[chi.reaction];
  if (chi.assignment.size() != rx.rgroups.size()) throw Error("assignment size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < chi.assignment.size(); ++i) {
    const auto& a = chi.assignment[i];
    const auto pos = a.rgroup == rx.rgroups[i].id ? library.position_of(a.rgroup, a.synthon)
                                                   : std::nullopt;
    if (!pos) {
      throw Error("no contribution for (rgroup " + std::to_string(a.rgroup) + ", synthon " +
                  std::to_string(a.synthon) + ")");
    }
    sum += static_cast<double>(table.value(task, library.pair_offset(a.rgroup) + *pos));
  }
  return sum + table.bias()[task];
}

double apex_score(const ContributionTable& table, const CslLibrary& library, const MultiIndex& chi,
                  std::string_view task) {
  return apex_score(table, library, chi, table.task_index(task));
}

// ---------------------------------------------------------------------------
// Queries

std::string to_string(Direction d) { return d == Direction::maximize ? "maximize" : "minimize"; }

Direction direction_from_string(std::string_view name) {
  if (name == "maximize" || name == "max") return Direction::maximize;
  if (name == "minimize" || name == "min") return Direction::minimize;
  throw Error("unknown direction '" + std::string(name) + "' (expected maximize or minimize)");
}

void validate_query(const QuerySpec& query, const ContributionTable* table) {
  if (query.objective.empty()) throw Error("query has no objective task");
  for (const auto& c : query.constraints) {
    if (std::isnan(c.lower) || std::isnan(c.upper)) {
      throw Error("constraint on '" + c.task + "' has a NaN bound");
    }
    if (!(c.lower <= c.upper) || c.lower == kInf || c.upper == -kInf) {
      throw Error("constraint on '" + c.task + "' needs lower <= upper with finite reach");
    }
  }
  if (table) {
    table->task_index(query.objective);
    for (const auto& c : query.constraints) table->task_index(c.task);
  }
}

double violation(std::span<const double> values, std::span<const Constraint> constraints) {
  if (values.size() != constraints.size()) throw Error("one value per constraint required");
  double below = 0.0, above = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    below += std::max(0.0, constraints[i].lower - values[i]);
    above += std::max(0.0, values[i] - constraints[i].upper);
  }
  const double c = -below - above;
  return c == 0.0 ? 0.0 : c;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Key {
  double c;    // violation, <= 0
  double obj;  // signed objective, larger is better
  std::uint64_t g;
};

inline bool better(const Key& a, const Key& b) {
  if (a.c != b.c) return a.c > b.c;
  if (a.obj != b.obj) return a.obj > b.obj;
  return a.g < b.g;
}

struct ByBetter {
  bool operator()(const Key& a, const Key& b) const { return better(a, b); }
};

// Bounded queue of the best k keys. The heap front is the worst retained key.
class BoundedQueue {
 public:
  explicit BoundedQueue(std::uint64_t k) : k_(k) {}

  bool full() const { return heap_.size() >= k_; }
  const Key& worst() const { return heap_.front(); }

  void push(const Key& key) {
    if (k_ == 0) return;
    if (heap_.size() < k_) {
      heap_.push_back(key);
      std::push_heap(heap_.begin(), heap_.end(), ByBetter{});
    } else if (better(key, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), ByBetter{});
      heap_.back() = key;
      std::push_heap(heap_.begin(), heap_.end(), ByBetter{});
    }
  }

  std::vector<Key> take() { return std::move(heap_); }

 private:
  std::uint64_t k_;
  std::vector<Key> heap_;
};

// Query resolved against a table: task 0 is the objective, then constraints.
struct Resolved {
  std::vector<const float*> values;
  std::vector<double> bias;
  std::vector<double> lower, upper;
  double sign = 1.0;
};

Resolved resolve(const ContributionTable& table, const QuerySpec& query) {
  validate_query(query, &table);
  Resolved r;
  auto add = [&](const std::string& name) {
    const auto i = table.task_index(name);
    r.values.push_back(table.task_values(i));
    r.bias.push_back(table.bias()[i]);
  };
  add(query.objective);
  for (const auto& c : query.constraints) {
    add(c.task);
    r.lower.push_back(c.lower);
    r.upper.push_back(c.upper);
  }
  r.sign = query.direction == Direction::maximize ? 1.0 : -1.0;
  return r;
}

constexpr std::size_t kMaxTasks = 64;

// Calls sink(g, signed objective, violation) for every g in [begin, end) in
// ascending order. Per-task partial sums over the leading R-groups are kept
// left to right, so each score equals ((0 + v_1) + v_2 + ... + v_c) + b.
template <class Sink>
void scan_range(const CslLibrary& library, const Resolved& q, std::uint64_t begin, std::uint64_t end,
                Sink&& sink) {
  const std::size_t n_tasks = q.values.size();
  const std::size_t n_cons = n_tasks - 1;
  if (n_tasks > kMaxTasks) throw Error("too many constraints in one query");
  const std::size_t max_c = library.max_rgroups_per_reaction();
  std::vector<std::uint32_t> digits(max_c);
  std::vector<double> prefix((max_c + 1) * n_tasks, 0.0);  // prefix[level * n_tasks + task]
  std::vector<std::vector<const float*>> base(max_c, std::vector<const float*>(n_tasks));
  std::vector<std::uint32_t> sizes(max_c);

  std::uint64_t g = begin;
  while (g < end) {
    const ReactionId t = library.decode_digits(g, digits);
    const auto& rx = library.reactions()[t];
    const std::size_t c = rx.rgroups.size();
    const std::uint64_t rx_end =
        std::min(end, library.reaction_offset(t) + library.reaction_product_count(t));
    for (std::size_t lvl = 0; lvl < c; ++lvl) {
      const auto& rg = rx.rgroups[lvl];
      sizes[lvl] = static_cast<std::uint32_t>(rg.synthons.size());
      for (std::size_t i = 0; i < n_tasks; ++i) base[lvl][i] = q.values[i] + library.pair_offset(rg.id);
    }
    auto refresh = [&](std::size_t from) {
      for (std::size_t lvl = from; lvl + 1 < c; ++lvl) {
        for (std::size_t i = 0; i < n_tasks; ++i) {
          prefix[(lvl + 1) * n_tasks + i] =
              prefix[lvl * n_tasks + i] + static_cast<double>(base[lvl][i][digits[lvl]]);
        }
      }
    };
    refresh(0);
    const std::size_t lv = c - 1;
    const double* pre = &prefix[lv * n_tasks];
    while (g < rx_end) {
      const std::uint32_t stop = static_cast<std::uint32_t>(
          std::min<std::uint64_t>(sizes[lv], digits[lv] + (rx_end - g)));
      const float* obj_row = base[lv][0];
      for (std::uint32_t j = digits[lv]; j < stop; ++j, ++g) {
        const double obj = (pre[0] + static_cast<double>(obj_row[j])) + q.bias[0];
        double viol = 0.0;
        if (n_cons > 0) {
          double below = 0.0, above = 0.0;
          for (std::size_t k = 0; k < n_cons; ++k) {
            const double f = (pre[k + 1] + static_cast<double>(base[lv][k + 1][j])) + q.bias[k + 1];
            below += std::max(0.0, q.lower[k] - f);
            above += std::max(0.0, f - q.upper[k]);
          }
          viol = -below - above;
          if (viol == 0.0) viol = 0.0;
        }
        sink(g, q.sign * obj, viol);
      }
      if (g >= rx_end) break;
      // Odometer carry into the leading R-groups.
      digits[lv] = 0;
      std::size_t lvl = lv;
      while (lvl-- > 0) {
        if (++digits[lvl] < sizes[lvl]) break;
        digits[lvl] = 0;
      }
      refresh(lvl);
    }
  }
}

ScoredCompound materialize(const CslLibrary& library, const ContributionTable& table,
                           const QuerySpec& query, const Key& key) {
  ScoredCompound out;
  out.global_index = key.g;
  out.chi = library.decode_index(GlobalIndex{key.g});
  out.objective = apex_score(table, library, out.chi, query.objective);
  for (const auto& c : query.constraints) {
    out.constraint_values.push_back(apex_score(table, library, out.chi, c.task));
  }
  out.violation = violation(out.constraint_values, query.constraints);
  return out;
}

void finish(TopKResult& result, std::vector<Key> keys, const CslLibrary& library,
            const ContributionTable& table, const QuerySpec& query) {
  std::sort(keys.begin(), keys.end(), ByBetter{});
  for (const auto& key : keys) {
    if (key.c < 0.0) {
      ++result.discarded;
      continue;
    }
    result.items.push_back(materialize(library, table, query, key));
  }
  result.retained = result.items.size();
}

}  // namespace

TopKResult search_topk_stream(const CslLibrary& library, const ContributionTable& table,
                              const QuerySpec& query, const StreamOptions& options) {
  const auto t0 = Clock::now();
  table.check_library(library);
  const Resolved q = resolve(table, query);
  std::uint64_t begin = 0, end = library.product_count();
  if (options.range) {
    std::tie(begin, end) = *options.range;
    if (begin > end || end > library.product_count()) throw Error("search range out of bounds");
  }
  TopKResult result;
  if (query.k == 0) {
    result.total_seconds = seconds_since(t0);
    return result;
  }

  const std::size_t workers = resolve_threads(options.threads);
  std::vector<BoundedQueue> queues(workers, BoundedQueue(query.k));
  const auto scan0 = Clock::now();
  parallel_for(begin, end, workers, [&](std::uint64_t b, std::uint64_t e, std::size_t w) {
    auto& queue = queues[w];
    scan_range(library, q, b, e, [&](std::uint64_t g, double obj, double viol) {
      if (queue.full()) {
        const Key& worst = queue.worst();
        if (viol < worst.c || (viol == worst.c && obj <= worst.obj)) return;
      }
      queue.push(Key{viol, obj, g});
    });
  });
  result.scan_seconds = seconds_since(scan0);
  result.scanned = end - begin;

  const auto sel0 = Clock::now();
  std::vector<Key> merged;
  for (auto& queue : queues) {
    auto part = queue.take();
    merged.insert(merged.end(), part.begin(), part.end());
  }
  if (merged.size() > query.k) {
    std::nth_element(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(query.k),
                     merged.end(), ByBetter{});
    merged.resize(query.k);
  }
  finish(result, std::move(merged), library, table, query);
  result.select_seconds = seconds_since(sel0);
  result.total_seconds = seconds_since(t0);
  return result;
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> batch_partition(const CslLibrary& library,
                                                                     std::uint64_t chunk_size) {
  if (chunk_size == 0) throw Error("chunk size must be positive");
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  std::uint64_t start = 0, cursor = 0;
  for (ReactionId t = 0; t < library.reaction_count(); ++t) {
    const std::uint64_t block = library.inner_block_size(t);
    const std::uint64_t blocks = library.reaction_product_count(t) / block;
    for (std::uint64_t b = 0; b < blocks; ++b) {
      if (cursor > start && cursor - start + block > chunk_size) {
        out.emplace_back(start, cursor);
        start = cursor;
      }
      cursor += block;
      if (cursor - start >= chunk_size) {
        out.emplace_back(start, cursor);
        start = cursor;
      }
    }
  }
  if (cursor > start) out.emplace_back(start, cursor);
  return out;
}

TopKResult search_topk_batched(const CslLibrary& library, const ContributionTable& table,
                               const QuerySpec& query, const BatchedOptions& options) {
  const auto t0 = Clock::now();
  table.check_library(library);
  const Resolved q = resolve(table, query);
  TopKResult result;
  if (query.k == 0) {
    result.total_seconds = seconds_since(t0);
    return result;
  }
  const std::size_t workers = resolve_threads(options.threads);
  const auto batches = batch_partition(library, options.chunk_size);

  std::vector<Key> carried;  // running top-k, best first
  std::vector<double> c_arr, obj_arr;
  std::vector<std::uint64_t> pos;
  for (const auto& [b_start, b_end] : batches) {
    const std::uint64_t n_carried = carried.size();
    const std::uint64_t n = n_carried + (b_end - b_start);
    c_arr.resize(n);
    obj_arr.resize(n);
    for (std::uint64_t i = 0; i < n_carried; ++i) {
      c_arr[i] = carried[i].c;
      obj_arr[i] = carried[i].obj;
    }

    const auto scan0 = Clock::now();
    parallel_for(b_start, b_end, workers, [&](std::uint64_t b, std::uint64_t e, std::size_t) {
      scan_range(library, q, b, e, [&](std::uint64_t g, double obj, double viol) {
        const std::uint64_t slot = n_carried + (g - b_start);
        c_arr[slot] = viol;
        obj_arr[slot] = obj;
      });
    });
    result.scan_seconds += seconds_since(scan0);

    // Selection: positions below n_carried are carried winners, the rest map
    // back to global indices through the batch start.
    const auto sel0 = Clock::now();
    auto key_at = [&](std::uint64_t p) {
      return Key{c_arr[p], obj_arr[p], p < n_carried ? carried[p].g : b_start + p - n_carried};
    };
    pos.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) pos[i] = i;
    auto cmp = [&](std::uint64_t a, std::uint64_t b) { return better(key_at(a), key_at(b)); };
    const std::uint64_t keep = std::min<std::uint64_t>(query.k, n);
    if (keep < n) {
      std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(keep), pos.end(), cmp);
    }
    std::sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(keep), cmp);
    std::vector<Key> next(keep);
    for (std::uint64_t i = 0; i < keep; ++i) next[i] = key_at(pos[i]);
    carried = std::move(next);
    result.select_seconds += seconds_since(sel0);
  }
  result.scanned = library.product_count();
  const auto fin0 = Clock::now();
  finish(result, std::move(carried), library, table, query);
  result.select_seconds += seconds_since(fin0);
  result.total_seconds = seconds_since(t0);
  return result;
}

// ---------------------------------------------------------------------------
// Cost accounting

CostEstimate cost_estimate(const CslLibrary& library, std::uint64_t d, std::uint64_t k,
                           std::uint64_t tasks) {
  CostEstimate e;
  e.synthon_encoder_evaluations = library.synthon_count();
  e.products = library.product_count();
  e.rows_no_sharing = library.synthon_count();
  e.rows_actual = library.pair_count();
  e.cache_bytes_no_sharing = e.rows_no_sharing * d * 4;
  e.cache_bytes_actual = e.rows_actual * d * 4;
  e.precompute_flops_no_sharing = precompute_flops(e.rows_no_sharing, d);
  e.precompute_flops_actual = precompute_flops(e.rows_actual, d);
  for (ReactionId t = 0; t < library.reaction_count(); ++t) {
    e.scoring_flops_per_task +=
        library.reaction_product_count(t) * library.reactions()[t].rgroups.size();
  }
  e.scoring_flops_total = e.scoring_flops_per_task * tasks;
  e.table_bytes_actual = e.rows_actual * tasks * 4;
  e.queue_entries = std::min(k, e.products);
  return e;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr char kTableMagic[8] = {'A', 'P', 'E', 'X', 'C', 'T', 'B', '1'};

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error("contribution table file is truncated");
  return value;
}

std::string join_ids(const MultiIndex& chi) {
  std::string out;
  for (std::size_t i = 0; i < chi.assignment.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(chi.assignment[i].synthon);
  }
  return out;
}

}  // namespace

void write_table(std::ostream& out, const ContributionTable& table, const CslLibrary& library) {
  table.check_library(library);
  out.write(kTableMagic, sizeof(kTableMagic));
  put<std::uint32_t>(out, 1);
  put<std::uint64_t>(out, table.library_fingerprint());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(table.task_count()));
  for (std::size_t i = 0; i < table.task_count(); ++i) {
    const auto& name = table.tasks()[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<double>(out, table.bias()[i]);
  }
  put<std::uint64_t>(out, table.pair_rows());
  for (RgroupId r = 0; r < library.rgroup_count(); ++r) {
    for (auto s : library.rgroup(r).synthons) {
      put<std::uint32_t>(out, r);
      put<std::uint32_t>(out, s);
    }
  }
  out.write(reinterpret_cast<const char*>(table.values().data()),
            static_cast<std::streamsize>(table.values().size() * sizeof(float)));
  if (!out) throw Error("failed writing contribution table");
}

ContributionTable read_table(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTableMagic, sizeof(magic)) != 0) {
    throw Error("not an APEX contribution table file");
  }
  if (get<std::uint32_t>(in) != 1) throw Error("unsupported contribution table version");
  const auto fingerprint = get<std::uint64_t>(in);
  const auto n_tasks = get<std::uint32_t>(in);
  std::vector<std::string> tasks;
  std::vector<double> bias;
  for (std::uint32_t i = 0; i < n_tasks; ++i) {
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw Error("contribution table task name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    tasks.push_back(std::move(name));
    bias.push_back(get<double>(in));
  }
  const auto rows = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < rows; ++i) {
    get<std::uint32_t>(in);
    get<std::uint32_t>(in);
  }
  std::vector<float> values(static_cast<std::size_t>(rows) * n_tasks);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!in) throw Error("contribution table file is truncated");
  return ContributionTable(fingerprint, std::move(tasks), std::move(bias),
                           static_cast<std::size_t>(rows), std::move(values));
}

void save_table(const ContributionTable& table, const CslLibrary& library, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_table(out, table, library);
}

ContributionTable load_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open contribution table " + path);
  return read_table(in);
}

void write_topk(std::ostream& out, const TopKResult& result, const QuerySpec& query,
                const CslLibrary& library, bool with_product) {
  if (query.k == 0) return;
  out << "rank\tglobal_index\treaction_id\tsynthon_ids\tobjective\tviolation";
  for (const auto& c : query.constraints) out << '\t' << c.task;
  if (with_product) out << "\tproduct";
  out << '\n';
  for (std::size_t i = 0; i < result.items.size(); ++i) {
    const auto& item = result.items[i];
    out << (i + 1) << '\t' << item.global_index << '\t' << item.chi.reaction << '\t'
        << join_ids(item.chi) << '\t' << text::format_double(item.objective) << '\t'
        << text::format_double(item.violation);
    for (double v : item.constraint_values) out << '\t' << text::format_double(v);
    if (with_product) out << '\t' << library.assemble(item.chi);
    out << '\n';
  }
}

void save_topk(const TopKResult& result, const QuerySpec& query, const CslLibrary& library,
               const std::string& path, bool with_product) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_topk(out, result, query, library, with_product);
  if (!out) throw Error("failed writing " + path);
}

}  // namespace apex
