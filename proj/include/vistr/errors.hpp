#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vistr {

enum class ErrorKind {
  File,
  Format,
  Integrity,
  Data,
  Shape,
  Parameter,
  Divergence,
  Degenerate,
  InsufficientMatches,
  NoSubmap,
  EmptyMap,
  UndefinedMetric,
  Config,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::File: return "file";
    case ErrorKind::Format: return "format";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Data: return "data";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::InsufficientMatches: return "insufficient-matches";
    case ErrorKind::NoSubmap: return "no-submap";
    case ErrorKind::EmptyMap: return "empty-map";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit-code table) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace vistr
