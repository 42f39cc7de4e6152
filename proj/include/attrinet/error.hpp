#pragma once

#include <stdexcept>
#include <string>

namespace attrinet {

/// Failure categories; the CLI maps them onto process exit codes.
enum class ErrorKind {
  Usage,      // bad flags or config values
  Data,       // malformed inputs, missing files, precondition violations on data
  Numerical,  // NaN/Inf during training
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Short machine-readable name, e.g. "MalformedBox".
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error data_error(std::string code, const std::string& message) {
  return Error(ErrorKind::Data, std::move(code), message);
}

inline Error usage_error(std::string code, const std::string& message) {
  return Error(ErrorKind::Usage, std::move(code), message);
}

inline Error numerical_error(std::string code, const std::string& message) {
  return Error(ErrorKind::Numerical, std::move(code), message);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
      return 2;
    case ErrorKind::Data:
      return 3;
    case ErrorKind::Numerical:
      return 4;
  }
  return 1;
}

}  // namespace attrinet
