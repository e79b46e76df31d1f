#pragma once

#include <stdexcept>
#include <string>

namespace xstage {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument violates an operation's precondition (range, finiteness, capacity).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A scenario or configuration file failed schema validation.
class SchemaError : public Error {
 public:
  SchemaError(std::string field, std::size_t line, const std::string& what)
      : Error(format(field, line, what)), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& field, std::size_t line, const std::string& what) {
    std::string out = "line " + std::to_string(line);
    if (!field.empty()) out += ", field '" + field + "'";
    return out + ": " + what;
  }

  std::string field_;
  std::size_t line_;
};

}  // namespace xstage
