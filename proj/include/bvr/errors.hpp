#pragma once

#include <stdexcept>
#include <string>

namespace bvr {

// Shape mismatches, invalid options, schema violations. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or numeric contract violations; the message names the
// kernel or array that produced them. CLI exit code 4.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem and serialization failures. CLI exit code 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bvr
