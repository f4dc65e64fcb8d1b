#pragma once

#include <stdexcept>
#include <string>

namespace masa {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Violated precondition that is not a shape problem (empty lists, non-scalar loss, ...).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration or model/adapter description.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values produced during a computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Filesystem or stream failure; the message always carries the offending path.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace masa
