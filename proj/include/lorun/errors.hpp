#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lorun {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or geometry mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated (bad argument value, bad state).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; carries the byte offset where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Iterative solver failed to reach its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what + " (relative residual " + std::to_string(residual) + ")"), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration (unknown key, bad value, incompatible checkpoint).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace lorun
