#pragma once

#include <stdexcept>
#include <string>

namespace warpkit {

// Error categories map onto the CLI exit-code contract:
// config -> 2, numeric -> 3, io -> 4.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated API contract (wrong tape usage, non-scalar loss, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad tensors handed to an injection hook.
struct InjectionError : std::runtime_error {
    explicit InjectionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace warpkit
