#include "gwvlm/error.hpp"

namespace gwvlm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kHttpStatus: return "http_status";
    case ErrorCode::kDecode: return "decode";
    case ErrorCode::kCacheMiss: return "cache_miss";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kEmptyCompletion: return "empty_completion";
    case ErrorCode::kUnparseableAnswer: return "unparseable_answer";
  }
  return "unknown";
}

}  // namespace gwvlm
