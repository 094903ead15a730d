#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixfit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Observation outside a family's support, or a parameter outside its domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Cholesky factorization failed (matrix not positive definite).
class DecompositionError : public Error {
 public:
  using Error::Error;
};

/// Shapes of two inputs do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A component lost (almost) all of its mass or collapsed onto a single point.
class DegenerateComponentError : public Error {
 public:
  DegenerateComponentError(std::size_t group, const std::string& what,
                           std::size_t iteration = 0)
      : Error("degenerate component " + std::to_string(group) + ": " + what +
              (iteration ? " (iteration " + std::to_string(iteration) + ")"
                         : std::string{})),
        group_(group),
        iteration_(iteration) {}

  std::size_t group() const noexcept { return group_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t group_;
  std::size_t iteration_;
};

/// The objective of a monotone algorithm decreased beyond the allowed slack.
class MonotonicityError : public Error {
 public:
  MonotonicityError(std::size_t iteration, double before, double after)
      : Error("objective decreased at iteration " + std::to_string(iteration) +
              ": " + std::to_string(before) + " -> " + std::to_string(after)),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Normal matrix of a least-squares problem is rank deficient.
class CollinearityError : public Error {
 public:
  CollinearityError(std::vector<std::size_t> columns, const std::string& what)
      : Error(what), columns_(std::move(columns)) {}

  const std::vector<std::size_t>& columns() const noexcept { return columns_; }

 private:
  std::vector<std::size_t> columns_;
};

/// Observed Hessian of a score is singular.
class SingularHessianError : public Error {
 public:
  using Error::Error;
};

/// Not enough (weighted) observations to estimate a quantity.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Several independent attempts all failed; carries each cause.
class AggregateError : public Error {
 public:
  explicit AggregateError(std::vector<std::string> causes)
      : Error(join(causes)), causes_(std::move(causes)) {}

  const std::vector<std::string>& causes() const noexcept { return causes_; }

 private:
  static std::string join(const std::vector<std::string>& causes) {
    std::string out = "all " + std::to_string(causes.size()) + " attempts failed";
    for (std::size_t i = 0; i < causes.size(); ++i) {
      out += "\n  [" + std::to_string(i) + "] " + causes[i];
    }
    return out;
  }

  std::vector<std::string> causes_;
};

/// More than half the replications of a Monte Carlo scenario failed.
class ScenarioAbortedError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file or configuration.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace mixfit
