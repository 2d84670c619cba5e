#pragma once

#include <stdexcept>
#include <string>

namespace bridgekit {

/// Input or no-arbitrage validation failure; maps to CLI exit code 1.
struct ValidationError : std::invalid_argument {
    std::string code;
    ValidationError(std::string code_, const std::string& msg)
        : std::invalid_argument(msg), code(std::move(code_)) {}
};

/// Numerical failure inside a solver (overflow, blow-up, singularity).
struct NumericalError : std::runtime_error {
    std::string code;
    NumericalError(std::string code_, const std::string& msg)
        : std::runtime_error(msg), code(std::move(code_)) {}
};

} // namespace bridgekit
