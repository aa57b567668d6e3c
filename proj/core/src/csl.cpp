#include "apex/csl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "apex/error.hpp"
#include "apex/hash.hpp"
#include "text_util.hpp"

namespace apex {

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_mul_overflow(a, b, &out)) {
    throw Error("product count overflows 64 bits");
  }
  return out;
}

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_add_overflow(a, b, &out)) {
    throw Error("product count overflows 64 bits");
  }
  return out;
}

bool valid_token(const std::string& token) {
  if (token.empty()) return false;
  return std::none_of(token.begin(), token.end(), [](unsigned char c) {
    return std::isspace(c) != 0;
  });
}

}  // namespace

CslLibrary::CslLibrary(std::vector<SynthonRecord> synthons,
                       std::vector<ReactionSpec> reactions)
    : synthons_(std::move(synthons)), reactions_(std::move(reactions)) {
  for (std::size_t i = 0; i < synthons_.size(); ++i) {
    if (synthons_[i].id != i) {
      throw Error("synthon ids must be dense and ordered; expected " +
                  std::to_string(i) + ", got " + std::to_string(synthons_[i].id));
    }
    if (!valid_token(synthons_[i].token)) {
      throw Error("synthon " + std::to_string(i) + " has an empty or whitespace token");
    }
  }

  std::size_t n_rgroups = 0;
  for (const auto& rxn : reactions_) n_rgroups += rxn.rgroups.size();
  rgroup_location_.assign(n_rgroups, RgroupLocation{});
  std::vector<bool> seen(n_rgroups, false);
  position_index_.assign(n_rgroups, {});
  std::vector<std::size_t> rgroup_size(n_rgroups, 0);

  reaction_offset_.assign(reactions_.size() + 1, 0);
  strides_.assign(reactions_.size(), {});
  for (std::size_t t = 0; t < reactions_.size(); ++t) {
    const auto& rxn = reactions_[t];
    if (rxn.id != t) {
      throw Error("reaction ids must be dense and ordered; expected " +
                  std::to_string(t) + ", got " + std::to_string(rxn.id));
    }
    if (rxn.rgroups.size() < 2) {
      throw Error("reaction " + std::to_string(t) + " has fewer than 2 R-groups");
    }
    max_rgroups_ = std::max(max_rgroups_, rxn.rgroups.size());
    for (std::uint32_t pos = 0; pos < rxn.rgroups.size(); ++pos) {
      const auto& rg = rxn.rgroups[pos];
      if (rg.id >= n_rgroups) {
        throw Error("R-group id " + std::to_string(rg.id) + " out of range");
      }
      if (seen[rg.id]) {
        throw Error("R-group " + std::to_string(rg.id) + " belongs to more than one reaction");
      }
      seen[rg.id] = true;
      rgroup_location_[rg.id] = RgroupLocation{static_cast<ReactionId>(t), pos};
      if (rg.synthons.empty()) {
        throw Error("R-group " + std::to_string(rg.id) + " has no eligible synthons");
      }
      auto& index = position_index_[rg.id];
      index.reserve(rg.synthons.size());
      for (std::uint32_t i = 0; i < rg.synthons.size(); ++i) {
        if (rg.synthons[i] >= synthons_.size()) {
          throw Error("R-group " + std::to_string(rg.id) + " references unknown synthon " +
                      std::to_string(rg.synthons[i]));
        }
        index.emplace_back(rg.synthons[i], i);
      }
      std::sort(index.begin(), index.end());
      for (std::size_t i = 1; i < index.size(); ++i) {
        if (index[i].first == index[i - 1].first) {
          throw Error("R-group " + std::to_string(rg.id) + " lists synthon " +
                      std::to_string(index[i].first) + " twice");
        }
      }
      rgroup_size[rg.id] = rg.synthons.size();
    }

    auto& strides = strides_[t];
    strides.assign(rxn.rgroups.size(), 1);
    std::uint64_t count = 1;
    for (std::size_t pos = rxn.rgroups.size(); pos-- > 0;) {
      strides[pos] = count;
      count = checked_mul(count, rxn.rgroups[pos].synthons.size());
    }
    reaction_offset_[t + 1] = checked_add(reaction_offset_[t], count);
  }
  total_products_ = reaction_offset_.back();

  pair_offset_.assign(n_rgroups + 1, 0);
  for (std::size_t r = 0; r < n_rgroups; ++r) {
    pair_offset_[r + 1] = pair_offset_[r] + rgroup_size[r];
  }
  fingerprint_ = hashing::fnv1a(serialize_library(*this));
}

CslLibrary::CslLibrary() : CslLibrary({}, {}) {}

std::uint64_t CslLibrary::reaction_product_count(ReactionId t) const {
  return reaction_offset_.at(t + 1) - reaction_offset_[t];
}

const RgroupSpec& CslLibrary::rgroup(RgroupId r) const {
  const auto loc = rgroup_location_.at(r);
  return reactions_[loc.reaction].rgroups[loc.position];
}

std::optional<std::uint32_t> CslLibrary::position_of(RgroupId r, SynthonId s) const {
  if (r >= position_index_.size()) return std::nullopt;
  const auto& index = position_index_[r];
  auto it = std::lower_bound(index.begin(), index.end(), std::pair<SynthonId, std::uint32_t>{s, 0});
  if (it == index.end() || it->first != s) return std::nullopt;
  return it->second;
}

GlobalIndex CslLibrary::encode_index(const MultiIndex& chi) const {
  if (chi.reaction >= reactions_.size()) {
    throw Error("reaction " + std::to_string(chi.reaction) + " out of range");
  }
  const auto& rxn = reactions_[chi.reaction];
  if (chi.assignment.size() != rxn.rgroups.size()) {
    throw Error("multi-index assigns " + std::to_string(chi.assignment.size()) +
                " R-groups; reaction " + std::to_string(chi.reaction) + " has " +
                std::to_string(rxn.rgroups.size()));
  }
  std::uint64_t g = reaction_offset_[chi.reaction];
  for (std::size_t pos = 0; pos < rxn.rgroups.size(); ++pos) {
    const auto& a = chi.assignment[pos];
    if (a.rgroup != rxn.rgroups[pos].id) {
      throw Error("multi-index R-group " + std::to_string(a.rgroup) +
                  " does not match reaction slot " + std::to_string(pos));
    }
    const auto digit = position_of(a.rgroup, a.synthon);
    if (!digit) {
      throw Error("synthon " + std::to_string(a.synthon) + " is not eligible for R-group " +
                  std::to_string(a.rgroup));
    }
    g += static_cast<std::uint64_t>(*digit) * strides_[chi.reaction][pos];
  }
  return GlobalIndex{g};
}

ReactionId CslLibrary::decode_digits(std::uint64_t g, std::span<std::uint32_t> digits) const {
  if (g >= total_products_) {
    throw Error("global index " + std::to_string(g) + " out of range (product count " +
                std::to_string(total_products_) + ")");
  }
  const auto it = std::upper_bound(reaction_offset_.begin(), reaction_offset_.end(), g);
  const auto t = static_cast<ReactionId>(std::distance(reaction_offset_.begin(), it) - 1);
  std::uint64_t rem = g - reaction_offset_[t];
  const auto& strides = strides_[t];
  for (std::size_t pos = 0; pos < strides.size(); ++pos) {
    digits[pos] = static_cast<std::uint32_t>(rem / strides[pos]);
    rem %= strides[pos];
  }
  return t;
}

MultiIndex CslLibrary::from_digits(ReactionId t, std::span<const std::uint32_t> digits) const {
  const auto& rxn = reactions_.at(t);
  MultiIndex chi;
  chi.reaction = t;
  chi.assignment.reserve(rxn.rgroups.size());
  for (std::size_t pos = 0; pos < rxn.rgroups.size(); ++pos) {
    const auto& rg = rxn.rgroups[pos];
    chi.assignment.push_back({rg.id, rg.synthons.at(digits[pos])});
  }
  return chi;
}

MultiIndex CslLibrary::decode_index(GlobalIndex g) const {
  std::vector<std::uint32_t> digits(std::max<std::size_t>(max_rgroups_, 1));
  const ReactionId t = decode_digits(g.value, digits);
  return from_digits(t, digits);
}

std::string CslLibrary::assemble(const MultiIndex& chi) const {
  std::vector<std::string_view> tokens;
  tokens.reserve(chi.assignment.size());
  for (const auto& a : chi.assignment) tokens.push_back(synthons_.at(a.synthon).token);
  std::sort(tokens.begin(), tokens.end());

  // The n-th marker in canonical order becomes bond label n/2 + 1, pairing
  // consecutive markers the way ring-closure digits pair atoms.
  std::string out;
  std::size_t marker = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back('.');
    for (char c : tokens[i]) {
      if (c == '*') {
        out.push_back('%');
        out += std::to_string(marker / 2 + 1);
        ++marker;
      } else {
        out.push_back(c);
      }
    }
  }
  return out;
}


std::uint64_t product_count(const CslLibrary& library) { return library.product_count(); }

GlobalIndex encode_index(const CslLibrary& library, const MultiIndex& chi) {
  return library.encode_index(chi);
}

MultiIndex decode_index(const CslLibrary& library, GlobalIndex g) {
  return library.decode_index(g);
}

std::string assemble(const CslLibrary& library, const MultiIndex& chi) {
  return library.assemble(chi);
}

// ---------------------------------------------------------------------------
// ProductStream

ProductStream::iterator::iterator(const CslLibrary* lib, std::uint64_t g, std::uint64_t end)
    : lib_(lib), g_(g), end_(end) {
  if (g_ < end_) {
    digits_.assign(std::max<std::size_t>(lib_->max_rgroups_per_reaction(), 1), 0);
    const ReactionId t = lib_->decode_digits(g_, digits_);
    current_ = lib_->from_digits(t, digits_);
  }
}

ProductStream::iterator& ProductStream::iterator::operator++() {
  ++g_;
  if (g_ >= end_) return *this;
  const auto& rxn = lib_->reactions()[current_.reaction];
  // Odometer step on the last R-group; roll into the next reaction when all
  // digits wrap.
  for (std::size_t pos = rxn.rgroups.size(); pos-- > 0;) {
    const auto& rg = rxn.rgroups[pos];
    if (++digits_[pos] < rg.synthons.size()) {
      current_.assignment[pos].synthon = rg.synthons[digits_[pos]];
      return *this;
    }
    digits_[pos] = 0;
    current_.assignment[pos].synthon = rg.synthons[0];
  }
  const ReactionId t = lib_->decode_digits(g_, digits_);
  current_ = lib_->from_digits(t, digits_);
  return *this;
}

ProductStream::ProductStream(const CslLibrary& library, std::uint64_t start, std::uint64_t end)
    : lib_(&library), start_(start), end_(end) {}

ProductStream::iterator ProductStream::begin() const { return iterator(lib_, start_, end_); }
ProductStream::iterator ProductStream::end() const { return iterator(lib_, end_, end_); }

ProductStream enumerate_products(const CslLibrary& library, GlobalIndex start, GlobalIndex end) {
  if (start.value > end.value || end.value > library.product_count()) {
    throw Error("invalid product range [" + std::to_string(start.value) + ", " +
                std::to_string(end.value) + ") for " +
                std::to_string(library.product_count()) + " products");
  }
  return ProductStream(library, start.value, end.value);
}

// ---------------------------------------------------------------------------
// Downsampling and synthetic generation

CslLibrary downsample(const CslLibrary& library, double per_reaction_fraction,
                      std::uint64_t seed) {
  if (!(per_reaction_fraction > 0.0 && per_reaction_fraction <= 1.0)) {
    throw Error("downsample fraction must lie in (0, 1]");
  }
  std::vector<ReactionSpec> reactions = library.reactions();
  for (auto& rxn : reactions) {
    const double keep_rate =
        std::pow(per_reaction_fraction, 1.0 / static_cast<double>(rxn.rgroups.size()));
    for (auto& rg : rxn.rgroups) {
      const auto n = rg.synthons.size();
      const auto keep = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(static_cast<double>(n) * keep_rate)), 1, n);
      if (keep == n) continue;
      std::mt19937_64 rng(hashing::combine(seed, rg.id));
      std::vector<SynthonId> kept;
      kept.reserve(keep);
      std::sample(rg.synthons.begin(), rg.synthons.end(), std::back_inserter(kept), keep, rng);
      rg.synthons = std::move(kept);
    }
  }
  return CslLibrary(library.synthons(), std::move(reactions));
}

namespace {

class TokenFactory {
 public:
  TokenFactory(const SyntheticConfig& config, std::mt19937_64& rng)
      : config_(config), rng_(rng) {
    const std::string letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
    const auto n = std::clamp<std::size_t>(config.alphabet_size, 1, letters.size());
    alphabet_ = letters.substr(0, n);
    max_length_ = std::max(config.token_min_length, config.token_max_length);
  }

  std::string make(int markers) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 0 && attempt % 256 == 0) ++max_length_;  // alphabet exhausted
      std::uniform_int_distribution<std::size_t> len_dist(
          std::max<std::size_t>(config_.token_min_length, 1), max_length_);
      std::uniform_int_distribution<std::size_t> ch_dist(0, alphabet_.size() - 1);
      std::string token;
      const auto len = len_dist(rng_);
      for (std::size_t i = 0; i < len; ++i) token.push_back(alphabet_[ch_dist(rng_)]);
      for (int m = 0; m < markers; ++m) {
        std::uniform_int_distribution<std::size_t> at(0, token.size());
        token.insert(token.begin() + static_cast<std::ptrdiff_t>(at(rng_)), '*');
      }
      if (used_.insert(token).second) return token;
    }
  }

 private:
  const SyntheticConfig& config_;
  std::mt19937_64& rng_;
  std::string alphabet_;
  std::size_t max_length_;
  std::unordered_set<std::string> used_;
};

}  // namespace

CslLibrary generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  if (config.synthons_min == 0 || config.synthons_max < config.synthons_min) {
    throw Error("synthons per R-group must satisfy 1 <= min <= max");
  }
  std::mt19937_64 rng(seed);
  TokenFactory tokens(config, rng);
  std::vector<SynthonRecord> synthons;
  // Pools of synthon ids by marker count, for cross-R-group sharing.
  std::vector<std::vector<SynthonId>> pools(3);
  std::vector<ReactionSpec> reactions;
  RgroupId next_rgroup = 0;

  std::uniform_int_distribution<std::size_t> size_dist(config.synthons_min, config.synthons_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t t = 0; t < config.n_reactions; ++t) {
    std::size_t components = 2;
    switch (config.components) {
      case SyntheticConfig::Components::two: components = 2; break;
      case SyntheticConfig::Components::three: components = 3; break;
      case SyntheticConfig::Components::mixed: components = (t % 2 == 0) ? 2 : 3; break;
    }
    ReactionSpec rxn;
    rxn.id = static_cast<ReactionId>(t);
    for (std::size_t pos = 0; pos < components; ++pos) {
      // End slots carry one attachment point, interior slots two.
      const int markers = (pos == 0 || pos + 1 == components) ? 1 : 2;
      auto& pool = pools[static_cast<std::size_t>(markers)];
      RgroupSpec rg;
      rg.id = next_rgroup++;
      const auto n = size_dist(rng);
      std::unordered_set<SynthonId> in_group;
      while (rg.synthons.size() < n) {
        SynthonId id = 0;
        bool reused = false;
        if (config.share_rate > 0.0 && !pool.empty() && unit(rng) < config.share_rate) {
          std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
          id = pool[pick(rng)];
          reused = !in_group.contains(id);
        }
        if (!reused) {
          id = static_cast<SynthonId>(synthons.size());
          synthons.push_back({id, tokens.make(markers)});
          pool.push_back(id);
        }
        in_group.insert(id);
        rg.synthons.push_back(id);
      }
      rxn.rgroups.push_back(std::move(rg));
    }
    reactions.push_back(std::move(rxn));
  }
  return CslLibrary(std::move(synthons), std::move(reactions));
}

// ---------------------------------------------------------------------------
// Serialization

void write_library(std::ostream& out, const CslLibrary& library) {
  out << "apex-csl 1\n";
  out << "synthons " << library.synthon_count() << '\n';
  for (const auto& s : library.synthons()) out << s.id << ' ' << s.token << '\n';
  out << "rgroups " << library.rgroup_count() << '\n';
  for (RgroupId r = 0; r < library.rgroup_count(); ++r) {
    out << r;
    for (SynthonId s : library.rgroup(r).synthons) out << ' ' << s;
    out << '\n';
  }
  out << "reactions " << library.reaction_count() << '\n';
  for (const auto& rxn : library.reactions()) {
    out << rxn.id;
    for (const auto& rg : rxn.rgroups) out << ' ' << rg.id;
    out << '\n';
  }
}

namespace {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  // Next non-blank, non-comment line; throws at EOF.
  std::istringstream next(const char* what) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      return std::istringstream(line);
    }
    throw Error("library file: unexpected end of input while reading " + std::string(what));
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error("library file line " + std::to_string(line_no_) + ": " + msg);
  }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
};

std::size_t read_section(LineReader& reader, const std::string& name) {
  auto ls = reader.next(name.c_str());
  std::string key;
  long long count = -1;
  if (!(ls >> key >> count) || key != name || count < 0) {
    reader.fail("expected '" + name + " <count>'");
  }
  return static_cast<std::size_t>(count);
}

std::vector<std::uint32_t> read_id_list(std::istringstream& ls, LineReader& reader) {
  std::vector<std::uint32_t> ids;
  std::string field;
  while (ls >> field) {
    const auto v = text::parse_u64(field);
    if (!v || *v > UINT32_MAX) reader.fail("malformed id '" + field + "'");
    ids.push_back(static_cast<std::uint32_t>(*v));
  }
  return ids;
}

}  // namespace

CslLibrary read_library(std::istream& in) {
  LineReader reader(in);
  {
    auto ls = reader.next("header");
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != "apex-csl") reader.fail("missing 'apex-csl' header");
    if (version != 1) reader.fail("unsupported library format version " + std::to_string(version));
  }

  const auto n_synthons = read_section(reader, "synthons");
  std::vector<SynthonRecord> synthons;
  synthons.reserve(n_synthons);
  for (std::size_t i = 0; i < n_synthons; ++i) {
    auto ls = reader.next("synthon record");
    std::string id_field, token, extra;
    if (!(ls >> id_field >> token) || (ls >> extra)) reader.fail("expected '<id> <token>'");
    const auto id = text::parse_u64(id_field);
    if (!id || *id != i) reader.fail("expected synthon id " + std::to_string(i));
    synthons.push_back({static_cast<SynthonId>(i), token});
  }

  const auto n_rgroups = read_section(reader, "rgroups");
  std::vector<std::vector<SynthonId>> rgroups(n_rgroups);
  for (std::size_t r = 0; r < n_rgroups; ++r) {
    auto ls = reader.next("R-group record");
    auto ids = read_id_list(ls, reader);
    if (ids.empty() || ids[0] != r) reader.fail("expected R-group id " + std::to_string(r));
    rgroups[r].assign(ids.begin() + 1, ids.end());
  }

  const auto n_reactions = read_section(reader, "reactions");
  std::vector<ReactionSpec> reactions;
  reactions.reserve(n_reactions);
  for (std::size_t t = 0; t < n_reactions; ++t) {
    auto ls = reader.next("reaction record");
    auto ids = read_id_list(ls, reader);
    if (ids.empty() || ids[0] != t) reader.fail("expected reaction id " + std::to_string(t));
    ReactionSpec rxn;
    rxn.id = static_cast<ReactionId>(t);
    for (std::size_t i = 1; i < ids.size(); ++i) {
      if (ids[i] >= n_rgroups) reader.fail("unknown R-group id " + std::to_string(ids[i]));
      rxn.rgroups.push_back({ids[i], rgroups[ids[i]]});
    }
    reactions.push_back(std::move(rxn));
  }
  return CslLibrary(std::move(synthons), std::move(reactions));
}

std::string serialize_library(const CslLibrary& library) {
  std::ostringstream out;
  write_library(out, library);
  return out.str();
}

void save_library(const CslLibrary& library, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_library(out, library);
  if (!out) throw Error("failed writing " + path);
}

CslLibrary load_library(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open library file " + path);
  return read_library(in);
}

}  // namespace apex
