#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace scns {

/// Base class for every error raised by the library. Messages are prefixed
/// with the module that raised them, e.g. "sampling: ...".
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A vector (or matrix row) with zero norm / zero variance was supplied where
/// a direction is required.
class DegenerateVectorError : public Error {
 public:
  explicit DegenerateVectorError(const std::string& what,
                                 std::optional<std::size_t> row = std::nullopt)
      : Error(what), row_(row) {}

  std::optional<std::size_t> row() const { return row_; }

 private:
  std::optional<std::size_t> row_;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Analytic evaluation refused because the requested size would lose too many
/// digits to cancellation.
class PrecisionError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Text input (config, CSV, embedding file) could not be parsed. `line()` is
/// 1-based; 0 means the error is not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace scns
