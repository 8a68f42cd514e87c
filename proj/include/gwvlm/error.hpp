#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gwvlm {

enum class ErrorCode {
  kInvalidArgument,
  kConfig,
  kParse,
  kIo,
  kTransport,
  kHttpStatus,
  kDecode,
  kCacheMiss,
  kTruncated,
  kEmptyCompletion,
  kUnparseableAnswer,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// HTTP failures keep the status so retry policies can inspect it.
class HttpError : public Error {
 public:
  HttpError(int status, const std::string& message)
      : Error(ErrorCode::kHttpStatus, message), status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

}  // namespace gwvlm
