#pragma once

#include <stdexcept>
#include <string>

namespace zeros {

/// Shape or axis mismatch between operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

/// Input outside an operation's numeric domain (log of non-positive, etc.).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

/// Non-finite value produced where the contract requires finite results.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

/// API contract violation (non-scalar loss, empty input, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

/// Invalid or infeasible configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// File or stream failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace zeros
