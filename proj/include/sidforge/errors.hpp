#pragma once

#include <stdexcept>
#include <string>

namespace sidforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated a precondition (bad dimensions, invalid config, unknown flag).
class UsageError : public Error {
public:
    using Error::Error;
};

/// A learnable parameter reached a state the math cannot handle (e.g. a zero reference vector).
class DegenerateParameterError : public Error {
public:
    using Error::Error;
};

/// Structural problem in a serialized file. `field()` names the offending field.
class FormatError : public Error {
public:
    FormatError(std::string field, const std::string& what)
        : Error("format error in '" + field + "': " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class UnsupportedVersionError : public FormatError {
public:
    UnsupportedVersionError(unsigned found, unsigned expected)
        : FormatError("version", "unsupported version " + std::to_string(found) + " (expected " +
                                     std::to_string(expected) + ")") {}
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sidforge
