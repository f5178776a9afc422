#pragma once

#include <stdexcept>
#include <string>

namespace tsvit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or mismatched model/dataset configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed data: out-of-range labels, empty classes, inconsistent signals.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract (stale cache, wrong cache for an op, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Failure while reading or writing one of the binary file formats.
class FormatError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, shape_mismatch, trailing_data, invalid_value };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace tsvit
