#pragma once

#include <stdexcept>
#include <string>

namespace hmeta {

// Shape / dimension mismatches between tensors or layers.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated preconditions (bad arguments, empty inputs, misuse of an API).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf detected in parameters or losses; training aborts with diagnostics.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed config files, unknown keys, unreadable paths.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hmeta
