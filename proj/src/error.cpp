#include "moekit/error.hpp"

namespace moekit {

const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::Argument: return "argument";
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Config: return "config";
    case ErrorCode::Resource: return "resource";
    case ErrorCode::Guard: return "guard";
    case ErrorCode::Io: return "io";
    case ErrorCode::IoBadMagic: return "io_bad_magic";
    case ErrorCode::IoVersion: return "io_version";
    case ErrorCode::IoTruncated: return "io_truncated";
    case ErrorCode::IoSize: return "io_size";
  }
  return "unknown";
}

}  // namespace moekit
