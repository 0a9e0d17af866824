#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fdlab {

/// Coarse failure categories. The CLI maps these onto exit codes.
enum class ErrorKind {
  usage,      // malformed request from the caller (bad flag, bad argument)
  config,     // schema or value violation in a config or plan
  io,         // unreadable / unwritable path
  corrupt,    // magic, version, digest or truncation failure on load
  shape,      // tensor extents disagree
  range,      // index or value outside its domain
  numeric,    // NaN / Inf / divergence
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::corrupt: return "corrupt";
    case ErrorKind::shape: return "shape";
    case ErrorKind::range: return "range";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

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

}  // namespace fdlab
