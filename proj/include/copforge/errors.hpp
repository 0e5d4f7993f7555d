#ifndef COPFORGE_ERRORS_HPP_
#define COPFORGE_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace copforge {

// Root of every error this library throws. `code()` is a short stable
// identifier used in the CLI's machine-readable error records.
class CopError : public std::runtime_error {
 public:
  CopError(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

class InvalidArgument : public CopError {
 public:
  explicit InvalidArgument(const std::string& message)
      : CopError("invalid_argument", message) {}
};

// A solution violates a constraint of its problem. The message names the
// violated constraint.
class InfeasibleSolution : public CopError {
 public:
  explicit InfeasibleSolution(const std::string& message)
      : CopError("infeasible_solution", message) {}
};

// A decoder tried to take an action the feasibility mask forbids.
class MaskedChoice : public CopError {
 public:
  explicit MaskedChoice(const std::string& message)
      : CopError("masked_choice", message) {}
};

// An exact oracle was asked to solve an instance above its size bound.
class CapabilityError : public CopError {
 public:
  explicit CapabilityError(const std::string& message)
      : CopError("capability_exceeded", message) {}
};

class DimensionMismatch : public CopError {
 public:
  explicit DimensionMismatch(const std::string& message)
      : CopError("dimension_mismatch", message) {}
};

class NonFiniteValue : public CopError {
 public:
  explicit NonFiniteValue(const std::string& message)
      : CopError("non_finite", message) {}
};

class MissingEmbedding : public CopError {
 public:
  explicit MissingEmbedding(const std::string& message)
      : CopError("missing_embedding", message) {}
};

class ProviderError : public CopError {
 public:
  ProviderError(std::string code, const std::string& message)
      : CopError(std::move(code), message) {}
};

class IoError : public CopError {
 public:
  explicit IoError(const std::string& message) : CopError("io_error", message) {}
};

class ConfigMismatch : public CopError {
 public:
  explicit ConfigMismatch(const std::string& message)
      : CopError("config_mismatch", message) {}
};

}  // namespace copforge

#endif  // COPFORGE_ERRORS_HPP_
