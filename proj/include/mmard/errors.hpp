#pragma once

#include <stdexcept>
#include <string>

namespace mmard {

// Error taxonomy shared by every module; the CLI maps kinds to exit codes.
enum class ErrorKind {
  Config,   // bad, unknown or missing configuration keys
  Io,       // filesystem failures, truncated files
  Format,   // unrecognized file contents (magic, version)
  Shape,    // tensor/architecture shape disagreements
  Value,    // out-of-range or otherwise invalid values
  Numeric,  // NaN/Inf surfaced during computation
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mmard
