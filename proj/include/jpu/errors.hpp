#pragma once

#include <stdexcept>
#include <string>

namespace jpu {

// Invalid configuration (bad dimensions, unknown variant, missing field).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config: " + msg) {}
};

// Malformed runtime input (token id out of range, sequence too long, bad file).
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error("input: " + msg) {}
};

// A documented precondition or invariant was violated by the caller.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract: " + msg) {}
};

// Non-finite values or numerically impossible requests mid-computation.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric: " + msg) {}
};

} // namespace jpu
