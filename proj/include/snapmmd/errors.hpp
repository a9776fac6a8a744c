#pragma once

#include <stdexcept>
#include <string>

namespace snapmmd {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can catch one type and map it to an exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
  using Error::Error;
};
class InsufficientDataError : public Error {
  using Error::Error;
};
class DegenerateError : public Error {
  using Error::Error;
};
class DimensionError : public Error {
  using Error::Error;
};
class NumericalError : public Error {
  using Error::Error;
};
class DomainError : public NumericalError {
  using NumericalError::NumericalError;
};
class DivergenceError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class SizeLimitError : public Error {
  using Error::Error;
};

}  // namespace snapmmd
