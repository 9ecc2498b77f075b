#pragma once

#include <stdexcept>
#include <string>

namespace ldp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform to an operation's requirements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an API precondition (wrong arity, non-scalar root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed bytes in a file format; carries the offending byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File-system failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a computation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A metric has no defined value for the given input (e.g. every pixel masked).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

}  // namespace ldp
