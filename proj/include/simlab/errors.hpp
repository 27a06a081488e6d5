#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace simlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Requested dimension cannot host the construction (e.g. ETF with d < n-1).
class DimensionError : public Error {
public:
  using Error::Error;
};

/// A row could not be normalised because its norm is (numerically) zero.
class ZeroRowError : public Error {
public:
  ZeroRowError(std::size_t row)
      : Error("row " + std::to_string(row) + " has zero norm"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

private:
  std::size_t row_;
};

/// Index outside [0, n) or an index set that is too small.
class IndexError : public Error {
public:
  using Error::Error;
};

/// A scalar map received an argument outside its domain.
class DomainError : public Error {
public:
  using Error::Error;
};

/// Invalid loss / optimizer / partition parameters.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// A parse failure reading one of the plain-text artifacts.
class FormatError : public Error {
public:
  using Error::Error;
};

} // namespace simlab
