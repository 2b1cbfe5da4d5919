#pragma once

#include <stdexcept>
#include <string>

namespace ncs {

enum class ErrorCode {
  InvalidArgument = 1,
  Config = 2,
  Numerical = 3,
  Io = 4,
  Contract = 5,
};

/// Base exception for every failure raised by the library. The code maps
/// one-to-one onto the C API status values and the CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorCode::InvalidArgument, what);
}
inline Error config_error(const std::string& what) {
  return Error(ErrorCode::Config, what);
}
inline Error numerical_error(const std::string& what) {
  return Error(ErrorCode::Numerical, what);
}
inline Error io_error(const std::string& what) {
  return Error(ErrorCode::Io, what);
}
inline Error contract_error(const std::string& what) {
  return Error(ErrorCode::Contract, what);
}

}  // namespace ncs
