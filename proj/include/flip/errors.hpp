#pragma once

#include <stdexcept>
#include <string>

namespace flip {

// Malformed input data or a column/field mismatch.
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration value or an inconsistent config/manifest pair.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure during training (diverged loss, unloadable checkpoint, ...).
struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Run-directory state errors (missing prerequisite, locked, would overwrite).
struct RunError : std::runtime_error {
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flip
