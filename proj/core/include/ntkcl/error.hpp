#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ntkcl {

enum class ErrorCode {
  kShapeMismatch,
  kNonPositiveDefinite,
  kNotSymmetric,
  kZeroMatrix,
  kUnknownSegment,
  kDivergence,
  kTaskOutOfRange,
  kNoConvergence,
  kSingularDenominator,
  kIllConditioned,
  kNotAPermutation,
  kInvalidCounts,
  kClassCollision,
  kEmptyClassifier,
  kUnknownLabel,
  kInvalidArgument,
  kConfigInvalid,
  kIo,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace ntkcl
