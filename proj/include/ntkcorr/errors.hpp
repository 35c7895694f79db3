#pragma once

#include <stdexcept>
#include <string>

namespace ntkcorr {

// Bad values or shapes handed to an operation.
struct InputError : std::invalid_argument {
    explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Instance too large for an exhaustive method.
struct SizeError : std::invalid_argument {
    explicit SizeError(const std::string& what) : std::invalid_argument(what) {}
};

// Inconsistent or unknown configuration.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Derivative order outside the supported range.
struct UnsupportedOrderError : std::invalid_argument {
    explicit UnsupportedOrderError(const std::string& what) : std::invalid_argument(what) {}
};

// Too few data points for a statistical fit.
struct InsufficientDataError : std::invalid_argument {
    explicit InsufficientDataError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace ntkcorr
