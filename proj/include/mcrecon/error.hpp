#ifndef MCRECON_ERROR_HPP_
#define MCRECON_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcrecon {

// Error categories. The CLI maps each one to its own exit code.
enum class ErrorKind {
  kInvalidDimension = 1,
  kInvalidParameter,
  kInfeasibleAcceleration,
  kInvalidInput,
  kOutOfRange,
  kDegenerateInput,
  kTrainingFailure,
  kMalformedFile,
  kIo,
  kInvalidConfiguration,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidDimension: return "invalid-dimension";
    case ErrorKind::kInvalidParameter: return "invalid-parameter";
    case ErrorKind::kInfeasibleAcceleration: return "infeasible-acceleration";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kOutOfRange: return "out-of-range";
    case ErrorKind::kDegenerateInput: return "degenerate-input";
    case ErrorKind::kTrainingFailure: return "training-failure";
    case ErrorKind::kMalformedFile: return "malformed-file";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kInvalidConfiguration: return "invalid-configuration";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace mcrecon

#endif  // MCRECON_ERROR_HPP_
