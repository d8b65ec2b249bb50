#pragma once

#include <stdexcept>
#include <string>

namespace towertrain {

// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched operand shapes or stale tapes (caller contract violations).
struct DimensionError : Error {
    using Error::Error;
};

// Bad configuration values or unknown keys.  CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Unreadable, malformed or inconsistent input data.  CLI exit code 3.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values or failed numerical procedures.  CLI exit code 4.
struct NumericError : Error {
    using Error::Error;
};

// A verification command found errors above its threshold.  CLI exit code 5.
struct CheckFailure : Error {
    using Error::Error;
};

// Brute-force reference asked to run beyond its size guard.  CLI exit code 2.
struct SizeGuardError : Error {
    using Error::Error;
};

}  // namespace towertrain
