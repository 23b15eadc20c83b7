#ifndef CANONET_ERROR_H_
#define CANONET_ERROR_H_

#include <stdexcept>
#include <string>
#include <string_view>

namespace canonet {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kCycle,
  kDanglingEdge,
  kShapeConflict,
  kUnsupported,
  kNonConvergence,
  kSanityCheckFailed,
  kIo,
};

std::string_view error_code_name(ErrorCode code);

// All library failures surface as this exception. `code()` is stable and is
// what the CLI writes into its machine-readable error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace canonet

#endif  // CANONET_ERROR_H_
