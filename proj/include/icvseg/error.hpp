#pragma once

#include <stdexcept>
#include <string>

namespace icvseg {

// Exit-code classes used by the command line surface: shape and argument
// problems are std::invalid_argument, everything below maps to a code.

/// Bad configuration or usage (exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unreadable, malformed or inconsistent input data (exit code 2).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training (exit code 3).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace icvseg
