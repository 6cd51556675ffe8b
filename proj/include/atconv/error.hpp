#pragma once

#include <stdexcept>
#include <string>

namespace atconv {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or sizes do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A scalar argument is outside its valid domain.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// An operation was invoked without the state it needs (e.g. a backward pass without a forward cache).
class StateError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf appeared, or an iterative method failed to converge.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed binary input (bad magic, bad header).
class FormatError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read or written completely.
class IoError : public Error {
public:
    using Error::Error;
};

/// Two inputs that must agree (e.g. image and label counts) do not.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

/// A metric is undefined for the given input (all-zero map, zero covariance, ...).
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// The requested operator configuration is not supported.
class UnsupportedError : public Error {
public:
    using Error::Error;
};

} // namespace atconv
