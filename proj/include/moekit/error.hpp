#pragma once

#include <stdexcept>
#include <string>

namespace moekit {

// Stable error codes; the CLI maps them to machine-readable identifiers.
enum class ErrorCode {
  Argument,      // invalid value passed to a library operation
  Dimension,     // tensor shape mismatch
  Config,        // inconsistent model/layer configuration (e.g. k > n)
  Resource,      // a guarded allocation would exceed its limit
  Guard,         // a combinatorial guard tripped (enumeration too large)
  Io,            // generic file I/O failure (open/read/write)
  IoBadMagic,    // file does not start with the expected magic
  IoVersion,     // unsupported format version
  IoTruncated,   // file ends before the payload the header promises
  IoSize,        // header size arithmetic inconsistent with file contents
};

const char* error_code_name(ErrorCode c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace moekit
