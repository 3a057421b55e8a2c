#pragma once

#include <stdexcept>
#include <string>

namespace mtuda {

/// Category of a failure; the CLI maps these onto process exit codes.
enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  config,
  format,
  label_firewall,
  divergence,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace mtuda
