#pragma once

#include <stdexcept>
#include <string>

namespace selattn {

/// Bad user input: malformed files, invalid configuration, missing paths.
/// The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent persisted or in-memory state: checkpoint/config shape
/// mismatch, corrupted tensors. The CLI maps this to exit code 3.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace selattn
