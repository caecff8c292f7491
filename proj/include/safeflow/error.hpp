#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace safeflow {

enum class ErrorCode {
  kInvalidArgument,
  kNotPositiveDefinite,
  kSingularHessian,
  kNonConvergence,
  kDegenerateConstraint,
  kMissingConstant,
  kInvalidConfig,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kSingularHessian: return "SingularHessian";
    case ErrorCode::kNonConvergence: return "NonConvergence";
    case ErrorCode::kDegenerateConstraint: return "DegenerateConstraint";
    case ErrorCode::kMissingConstant: return "MissingConstant";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Base exception for every failure surfaced by the library. The code lets
/// callers branch on the failure class without parsing messages.
class SolverError : public std::runtime_error {
 public:
  SolverError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        message_(what) {}

  ErrorCode code() const noexcept { return code_; }
  // what() without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

inline void require(bool condition, const std::string& what) {
  if (!condition) throw SolverError(ErrorCode::kInvalidArgument, what);
}

}  // namespace safeflow
