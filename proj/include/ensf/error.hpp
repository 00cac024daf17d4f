#pragma once

#include <stdexcept>
#include <string>

namespace ensf {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (caller bug).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse: empty batch, mismatched mask, wrong step index.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Bad numerical data: non-finite values, negative consumption, degenerate ranges.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (dimensions, block counts, names, ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed trajectory file. Carries the 1-based row/column of the offending cell.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what + " (row " + std::to_string(row) + ", column " +
              std::to_string(column) + ")"),
        row_(row),
        column_(column) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

/// Failure talking to an external forecast process.
class ExternalModelError : public Error {
 public:
  using Error::Error;
};

/// The forward model failed while propagating one ensemble member.
class ModelError : public Error {
 public:
  ModelError(long member, const std::string& what)
      : Error("forward model failed for member " + std::to_string(member) + ": " + what),
        member_(member) {}

  long member() const noexcept { return member_; }

 private:
  long member_;
};

/// A numerical integration produced a non-finite state.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace ensf
