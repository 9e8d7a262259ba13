#pragma once

#include <stdexcept>
#include <string>

namespace hasmm {

enum class ErrorKind {
  InvalidParameters,
  MalformedInput,
  Numerical,
  Convergence,
  FingerprintMismatch,
  Io,
  Usage,
};

const char* to_string(ErrorKind kind);

// Every failure the library reports is an Error; the CLI maps kind() to an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool ok, ErrorKind kind, const std::string& message) {
  if (!ok) throw Error(kind, message);
}

}  // namespace hasmm
