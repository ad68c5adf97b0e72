#pragma once

#include <stdexcept>
#include <string>

namespace dmil {

/// A caller broke a documented precondition (shape mismatch, range violation).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A value that must stay finite did not (diverged training, NaN input).
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File or format problems when reading datasets, checkpoints and configs.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace dmil
