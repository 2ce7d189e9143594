#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace qpat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; `field()` names the offending header field or key.
class ParseError : public Error {
public:
  ParseError(std::string field, const std::string& what)
      : Error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

class PreconditionError : public Error {
public:
  using Error::Error;
};

/// The iterative solver stopped at its iteration cap.
class SolveError : public Error {
public:
  SolveError(const std::string& what, double residual, long iterations)
      : Error(what), residual_(residual), iterations_(iterations) {}
  double residual() const noexcept { return residual_; }
  long iterations() const noexcept { return iterations_; }

private:
  double residual_;
  long iterations_;
};

class EstimationError : public Error {
public:
  using Error::Error;
};

}  // namespace qpat
