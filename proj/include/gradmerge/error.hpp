#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gradmerge {

// Every failure surfaced by the library carries one of these categories; the
// CLI prints the category as a prefix.
enum class ErrorKind {
  format,       // malformed file contents
  consistency,  // inputs disagree with each other (stale compat, mask/space mismatch)
  validation,   // well-formed input with out-of-contract values
  io,           // filesystem failures
  lookup,       // unknown tensor name
  usage,        // precondition violated by the caller (bad ratio, bad flag)
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void throw_error(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw_error(kind, message);
}

}  // namespace gradmerge
