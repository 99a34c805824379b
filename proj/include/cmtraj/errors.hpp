#pragma once

#include <stdexcept>
#include <string>

namespace cmtraj {

/// Violated precondition or shape contract.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf produced during a forward or backward pass, or a diverging fit.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent run configuration (bad values, missing files, dim mismatch).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw ContractViolation(message);
  }
}

}  // namespace cmtraj
