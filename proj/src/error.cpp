#include "gradmerge/error.hpp"

namespace gradmerge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::validation: return "validation";
    case ErrorKind::io: return "io";
    case ErrorKind::lookup: return "lookup";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

void throw_error(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace gradmerge
