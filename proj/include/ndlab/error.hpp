// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ndlab {

enum class ErrorKind {
  invalid_argument,
  parse,
  io,
  validation,
  budget_exceeded,
};

/// Exception type thrown by every ndlab module. The C API maps `kind` onto
/// its status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace ndlab
