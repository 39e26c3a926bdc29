#pragma once

#include <stdexcept>
#include <string>

namespace modseg {

/// Caller passed arguments that violate an operation's preconditions.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A file or byte stream does not follow the expected format.
class MalformedInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Filesystem or encoder/decoder failure.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical failure during optimization (e.g. non-finite gradients).
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Broken internal invariant (e.g. non-finite model output).
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace modseg
