#pragma once

#include <stdexcept>
#include <string>

namespace gsqa {

enum class ErrorKind {
  kParse,
  kSchema,
  kIo,
  kDomain,
  kData,
  kConfig,
  kContract,
  kUndefinedMetric,
  kNotFound,
  kConflict,
};

const char* to_string(ErrorKind kind);

// Single exception type for the toolkit; the kind drives the C API status
// code and the CLI exit code.
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

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace gsqa
