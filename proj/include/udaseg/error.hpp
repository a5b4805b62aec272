#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace udaseg {

enum class ErrorKind {
  InvalidArgument,
  ResourceLimit,
  Parse,
  Integrity,
  ConvergenceFailure,
  EmptyRoi,
  Configuration,
  Precondition,
  Io,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; the kind drives CLI exit codes and tests.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t byte_offset)
      : Error(ErrorKind::Parse, what + " (at byte " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}
  std::uint64_t byte_offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

// Re-throws `e` with a context prefix, keeping its kind.
[[noreturn]] void rethrow_with_context(const Error& e, const std::string& context);

}  // namespace udaseg
