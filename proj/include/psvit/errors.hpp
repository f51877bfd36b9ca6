#pragma once

#include <stdexcept>
#include <string>

namespace psvit {

// Shape/contract violations in tensor math and layer wiring.
class ShapeError : public std::invalid_argument {
public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Broken API precondition (wrong mode, missing input, non-scalar loss, ...).
class ContractError : public std::logic_error {
public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Non-finite values or undefined numeric results.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid genotype handed to an operation that requires a valid one.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O and persisted-format problems. `code` is stable and machine-readable
// (BAD_MAGIC, VERSION_MISMATCH, SHAPE_MISMATCH, MISSING_PARAM, IO, ...).
class IoError : public std::runtime_error {
public:
  IoError(std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

private:
  std::string code_;
};

// Domain errors surfaced by drivers (INFEASIBLE_BUDGET, NAN_LOSS, ...).
class DomainError : public std::runtime_error {
public:
  DomainError(std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

private:
  std::string code_;
};

}  // namespace psvit
