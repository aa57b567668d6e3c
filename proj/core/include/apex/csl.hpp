#pragma once

// Combinatorial synthesis library (CSL) data model.
//
// A library is a list of reactions; each reaction owns an ordered list of
// R-groups, and each R-group lists the synthons eligible for that slot. One
// synthon per R-group yields one product. Products are numbered by a global
// index in canonical order: reactions in declaration order, and within a
// reaction a mixed-radix number whose most significant digit is the first
// R-group. A digit is the position of the chosen synthon in its R-group list.

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace apex {

using SynthonId = std::uint32_t;
using RgroupId = std::uint32_t;
using ReactionId = std::uint32_t;

struct SynthonRecord {
  SynthonId id = 0;
  std::string token;  // non-empty, no whitespace; '*' marks attachment points
};

struct RgroupSpec {
  RgroupId id = 0;
  std::vector<SynthonId> synthons;
};

struct ReactionSpec {
  ReactionId id = 0;
  std::vector<RgroupSpec> rgroups;
};

struct Assignment {
  RgroupId rgroup = 0;
  SynthonId synthon = 0;
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct MultiIndex {
  ReactionId reaction = 0;
  std::vector<Assignment> assignment;  // one entry per R-group, reaction order
  friend bool operator==(const MultiIndex&, const MultiIndex&) = default;
};

struct GlobalIndex {
  std::uint64_t value = 0;
  friend auto operator<=>(const GlobalIndex&, const GlobalIndex&) = default;
};

/// Where an R-group sits in the hierarchy.
struct RgroupLocation {
  ReactionId reaction = 0;
  std::uint32_t position = 0;  // index within the reaction's R-group list
};

class CslLibrary {
 public:
  CslLibrary();

  /// Validates every structural invariant and throws apex::Error on the first
  /// violation. Ids must be dense and 0-based: synthons[i].id == i,
  /// reactions[t].id == t, and R-group ids cover 0..M-1 with each R-group
  /// owned by exactly one reaction.
  CslLibrary(std::vector<SynthonRecord> synthons,
             std::vector<ReactionSpec> reactions);

  const std::vector<SynthonRecord>& synthons() const { return synthons_; }
  const std::vector<ReactionSpec>& reactions() const { return reactions_; }

  std::size_t synthon_count() const { return synthons_.size(); }
  std::size_t rgroup_count() const { return rgroup_location_.size(); }
  std::size_t reaction_count() const { return reactions_.size(); }

  std::uint64_t product_count() const { return total_products_; }
  std::uint64_t reaction_product_count(ReactionId t) const;
  /// Global index of the first product of reaction t.
  std::uint64_t reaction_offset(ReactionId t) const { return reaction_offset_[t]; }
  /// Number of products sharing one first-R-group assignment in reaction t.
  std::uint64_t inner_block_size(ReactionId t) const { return strides_[t].front(); }
  /// Mixed-radix stride of R-group `position` in reaction t.
  std::uint64_t stride(ReactionId t, std::uint32_t position) const {
    return strides_[t][position];
  }

  const RgroupSpec& rgroup(RgroupId r) const;
  RgroupLocation rgroup_location(RgroupId r) const { return rgroup_location_.at(r); }

  /// (R-group, synthon) eligibility pairs are numbered densely: R-group r's
  /// pairs occupy rows [pair_offset(r), pair_offset(r) + |r|) in synthon-list
  /// order. Shared synthons get one row per R-group.
  std::size_t pair_count() const { return pair_offset_.empty() ? 0 : pair_offset_.back(); }
  std::size_t pair_offset(RgroupId r) const { return pair_offset_[r]; }
  std::optional<std::uint32_t> position_of(RgroupId r, SynthonId s) const;

  GlobalIndex encode_index(const MultiIndex& chi) const;
  MultiIndex decode_index(GlobalIndex g) const;

  /// Allocation-free decode into digits (synthon positions); returns the
  /// reaction. `digits` must hold at least as many entries as the reaction
  /// has R-groups.
  ReactionId decode_digits(std::uint64_t g, std::span<std::uint32_t> digits) const;
  MultiIndex from_digits(ReactionId t, std::span<const std::uint32_t> digits) const;

  /// Canonical product string: the constituent tokens sorted, attachment
  /// markers renumbered in that order, joined by '.'.
  std::string assemble(const MultiIndex& chi) const;

  /// 64-bit content hash of the serialized library (computed once).
  std::uint64_t fingerprint() const { return fingerprint_; }

  std::size_t max_rgroups_per_reaction() const { return max_rgroups_; }

 private:
  std::vector<SynthonRecord> synthons_;
  std::vector<ReactionSpec> reactions_;
  std::vector<RgroupLocation> rgroup_location_;
  std::vector<std::size_t> pair_offset_;  // size rgroup_count + 1
  // Per R-group (synthon, position) pairs sorted by synthon for lookup.
  std::vector<std::vector<std::pair<SynthonId, std::uint32_t>>> position_index_;
  std::vector<std::uint64_t> reaction_offset_;  // size reaction_count + 1
  std::vector<std::vector<std::uint64_t>> strides_;
  std::uint64_t total_products_ = 0;
  std::size_t max_rgroups_ = 0;
  std::uint64_t fingerprint_ = 0;
};

/// Σ over reactions of Π over R-group sizes. Throws apex::Error if the count
/// does not fit in 64 bits.
std::uint64_t product_count(const CslLibrary& library);

GlobalIndex encode_index(const CslLibrary& library, const MultiIndex& chi);
MultiIndex decode_index(const CslLibrary& library, GlobalIndex g);
std::string assemble(const CslLibrary& library, const MultiIndex& chi);

/// Lazy forward range over decode_index(g) for g in [start, end).
class ProductStream {
 public:
  class iterator {
   public:
    using iterator_category = std::input_iterator_tag;
    using value_type = MultiIndex;
    using difference_type = std::ptrdiff_t;
    using pointer = const MultiIndex*;
    using reference = const MultiIndex&;

    iterator() = default;
    reference operator*() const { return current_; }
    pointer operator->() const { return &current_; }
    iterator& operator++();
    void operator++(int) { ++*this; }
    std::uint64_t global_index() const { return g_; }
    friend bool operator==(const iterator& a, const iterator& b) { return a.g_ == b.g_; }

   private:
    friend class ProductStream;
    iterator(const CslLibrary* lib, std::uint64_t g, std::uint64_t end);

    const CslLibrary* lib_ = nullptr;
    std::uint64_t g_ = 0;
    std::uint64_t end_ = 0;
    std::vector<std::uint32_t> digits_;
    MultiIndex current_;
  };

  ProductStream(const CslLibrary& library, std::uint64_t start, std::uint64_t end);
  iterator begin() const;
  iterator end() const;
  std::uint64_t size() const { return end_ - start_; }

 private:
  const CslLibrary* lib_;
  std::uint64_t start_;
  std::uint64_t end_;
};

/// Throws apex::Error unless 0 <= start <= end <= product_count.
ProductStream enumerate_products(const CslLibrary& library, GlobalIndex start,
                                 GlobalIndex end);

/// Per-reaction uniform downsampling. Each R-group of a c-component reaction
/// keeps max(1, round(n * fraction^(1/c))) synthons drawn without
/// replacement; kept synthons retain their original relative order and ids.
CslLibrary downsample(const CslLibrary& library, double per_reaction_fraction,
                      std::uint64_t seed);

struct SyntheticConfig {
  enum class Components { two, three, mixed };

  std::size_t n_reactions = 10;
  Components components = Components::mixed;  // mixed alternates 2, 3, 2, ...
  std::size_t synthons_min = 10;  // per R-group, inclusive range
  std::size_t synthons_max = 10;
  std::size_t alphabet_size = 8;
  std::size_t token_min_length = 4;
  std::size_t token_max_length = 10;
  double share_rate = 0.0;  // probability an R-group slot reuses a synthon
};

CslLibrary generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

// Line-oriented text format:
//   apex-csl 1
//   synthons <N>        then N lines:  <id> <token>
//   rgroups <M>         then M lines:  <id> <synthon id>...
//   reactions <T>       then T lines:  <id> <rgroup id>...
// Blank lines and lines starting with '#' are ignored. Ids are 0-based and
// must appear in ascending order.
void write_library(std::ostream& out, const CslLibrary& library);
CslLibrary read_library(std::istream& in);
std::string serialize_library(const CslLibrary& library);
void save_library(const CslLibrary& library, const std::string& path);
CslLibrary load_library(const std::string& path);

}  // namespace apex
