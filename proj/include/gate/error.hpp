#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gate {

// Base for every error the engine raises on bad data or bad configuration.
// The CLI maps these to exit code 2; usage errors are handled by CLI11.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t offset = 0)
      : Error(format(what, line, offset)), line_(line), offset_(offset) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  static std::string format(const std::string& what, std::size_t line, std::size_t offset) {
    std::string out = "line " + std::to_string(line);
    if (offset != 0) out += ", offset " + std::to_string(offset);
    return out + ": " + what;
  }

  std::size_t line_;
  std::size_t offset_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a selection has nothing to rank; the service maps it to 422.
class SelectionError : public Error {
 public:
  using Error::Error;
};

}  // namespace gate
