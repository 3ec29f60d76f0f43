#pragma once

#include <stdexcept>
#include <string>

namespace c3s3 {

// Exit codes shared by every command-line entry point.
enum class ExitCode : int {
  ok = 0,
  usage = 2,
  data = 3,
  numeric = 4,
  oracle = 5,
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, truncated, or inconsistent on-disk data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or activation became non-finite. `component` names the culprit.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace c3s3
