#pragma once

#include <chrono>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crab {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A parameter lies outside the domain where the operation is defined.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Allocation would exceed a configured limit.
class CapacityError : public Error {
 public:
  CapacityError(const std::string& what, std::size_t limit)
      : Error(what + " (limit " + std::to_string(limit) + ")"), limit_(limit) {}
  std::size_t limit() const { return limit_; }

 private:
  std::size_t limit_;
};

// An iterative solver stopped before reaching its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual,
                   std::vector<double> history = {})
      : Error(what + " (residual " + std::to_string(residual) + ")"),
        residual_(residual),
        history_(std::move(history)) {}
  double residual() const { return residual_; }
  // Last sweep energies for variational solvers; empty otherwise.
  const std::vector<double>& history() const { return history_; }

 private:
  double residual_;
  std::vector<double> history_;
};

// Coefficient vectors inconsistent with the declared number of modes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Run configuration failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Cumulative discarded weight passed the abort threshold; m is too small.
class TruncationOverflowError : public Error {
 public:
  TruncationOverflowError(double discarded, double threshold)
      : Error("cumulative discarded weight " + std::to_string(discarded) +
              " exceeds abort threshold " + std::to_string(threshold)),
        discarded_(discarded) {}
  double discarded() const { return discarded_; }

 private:
  double discarded_;
};

// Wall-clock guard of a single evaluation fired.
class TimeLimitError : public Error {
 public:
  using Error::Error;
};

// Backend failure annotated with the coefficient vector that triggered it.
class EvaluationError : public Error {
 public:
  EvaluationError(const std::string& what, std::vector<double> coefficients)
      : Error(what), coefficients_(std::move(coefficients)) {}
  const std::vector<double>& coefficients() const { return coefficients_; }

 private:
  std::vector<double> coefficients_;
};

using Deadline = std::optional<std::chrono::steady_clock::time_point>;

inline void check_deadline(const Deadline& deadline) {
  if (deadline && std::chrono::steady_clock::now() > *deadline)
    throw TimeLimitError("evaluation exceeded its wall-clock budget");
}

inline void warn(const std::string& message) {
  std::cerr << "warning: " << message << '\n';
}

}  // namespace crab
