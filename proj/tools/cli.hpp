#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace apex::cli {

/// Runs one `apex` command line (args[0] is the program name). Returns the
/// process exit status; diagnostics go to `err`, summaries to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Global indices listed in a search result file, in rank order.
std::vector<std::uint64_t> read_result_indices(const std::string& path);

}  // namespace apex::cli
