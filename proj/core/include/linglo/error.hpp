#pragma once

#include <stdexcept>
#include <string>

namespace linglo {

// Every failure in the library carries a kind so callers (and the CLI) can map
// it to an exit path without string matching.
enum class ErrorKind {
  Shape,     // extents disagree with what an op requires
  Config,    // invalid model/bench configuration
  Usage,     // caller misuse (bad argument, non-scalar loss, unknown kind)
  Numeric,   // non-finite values where finite ones are required
  State,     // object not in the required state (e.g. merge before deploy)
  Io,        // file format / filesystem problems
  Training,  // divergence during optimisation
  Data,      // bad measurement data (e.g. too few points to fit)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace linglo
