#pragma once

#include <stdexcept>
#include <string>

namespace apex {

/// Raised for contract violations on user-supplied data (bad indices,
/// malformed files, mismatched tables). Programming errors use assert.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace apex
