#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmgr {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input is well-formed but geometrically or numerically degenerate.
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class DivisionByZero : public Error {
 public:
  DivisionByZero(const std::string& what, std::size_t index)
      : Error(what + " (task " + std::to_string(index) + ")"), index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace cmgr
