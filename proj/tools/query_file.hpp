#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "apex/engine.hpp"

namespace apex::cli {

enum class EngineVariant { stream, batched };

EngineVariant variant_from_string(std::string_view name);
std::string to_string(EngineVariant v);

/// A parsed query file:
///
///   {
///     "objective": {"task": "dock0", "direction": "minimize"},
///     "presets": ["lipinski"],
///     "constraints": [{"task": "tpsa", "lower": 40}],
///     "k": 100,
///     "engine": {"variant": "batched", "chunk_size": 1048576}
///   }
///
/// Preset bounds come first, in the order listed, followed by the explicit
/// constraints. Only "objective" is required.
struct QueryFile {
  QuerySpec query;
  EngineVariant variant = EngineVariant::stream;
  std::uint64_t chunk_size = 1 << 20;
};

/// Named constraint bundles. Throws apex::Error for unknown names.
std::vector<Constraint> preset_constraints(std::string_view name);
std::vector<std::string> preset_names();

/// Throws apex::Error on malformed input, invalid bounds, or (when `table` is
/// given) task names the table does not define.
QueryFile parse_query_file(std::string_view json, const ContributionTable* table = nullptr);
QueryFile load_query_file(const std::string& path, const ContributionTable* table = nullptr);

}  // namespace apex::cli
