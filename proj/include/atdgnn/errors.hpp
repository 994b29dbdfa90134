#pragma once

#include <stdexcept>
#include <string>

namespace atdgnn {

// Error taxonomy shared by the library and the CLI. Each class maps to a
// distinct process exit code in tools/atdgnn.cpp.

// Violated operation precondition (bad argument values, empty inputs).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape or dimension chain mismatch.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration (model sizing, graph presets, keys).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally invalid data (duplicate channels, bad trial table).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Byte-level damage: payload length disagrees with the manifest.
class CorruptionError : public std::runtime_error {
 public:
  explicit CorruptionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unsupported container format version.
class VersionError : public std::runtime_error {
 public:
  explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric check failure (gradient check above tolerance, non-finite loss).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace atdgnn
