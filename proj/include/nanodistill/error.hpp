#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nanodistill {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Cholesky hit a non-positive pivot.
class NotPositiveDefinite : public Error {
 public:
  NotPositiveDefinite(std::size_t pivot, double value)
      : Error("matrix is not positive definite: pivot " + std::to_string(pivot) +
              " = " + std::to_string(value)),
        pivot_(pivot) {}
  std::size_t pivot() const { return pivot_; }

 private:
  std::size_t pivot_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public FormatError {
 public:
  VersionMismatch(unsigned found, unsigned expected)
      : FormatError("incompatible format version " + std::to_string(found) +
                    " (this build reads version " + std::to_string(expected) + ")") {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::size_t step, double lr, double loss)
      : NumericalError("non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step) +
                       " (lr " + std::to_string(lr) + ")"),
        step_(step),
        lr_(lr) {}
  std::size_t step() const { return step_; }
  double learning_rate() const { return lr_; }

 private:
  std::size_t step_;
  double lr_;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

// Malformed backend response; keeps the raw body for diagnosis.
class ParseError : public BackendError {
 public:
  ParseError(const std::string& what, std::string raw)
      : BackendError(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

// Unusable configuration or command line: bad values, unknown keys,
// unresolvable paths.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace nanodistill
