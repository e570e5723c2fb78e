#pragma once

#include <stdexcept>
#include <string>

namespace carlab {

// Invalid parameters or malformed specifications (feature maps, policies,
// configs). Surfaces as exit code 2 from the CLI.
class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (NaN, unknown level,
// length mismatch).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

// Model fitting or variance estimation could not produce a result
// (empty arm, singular design, separation, failed resample).
class FitError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace carlab
