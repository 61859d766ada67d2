#pragma once

#include <stdexcept>
#include <string>

namespace fastnet {

enum class ErrorCode {
  invalid_shape,
  shape_mismatch,
  invalid_argument,
  non_finite,
  parse_error,
  io_error,
  bad_magic,
  bad_version,
  bad_crc,
  fingerprint_mismatch,
  bad_layout,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace fastnet
