#pragma once

#include <stdexcept>
#include <string>

namespace abdkit {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file content (bad magic, truncated payload, bad header).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Well-formed input that uses a feature the toolkit does not support.
class UnsupportedError : public Error {
public:
    using Error::Error;
};

/// Values that violate a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Index or interval outside its allowed range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Incompatible tensor or grid shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// API misuse (backward twice, non-scalar loss, non-finite values, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long iteration)
        : Error(what), iteration_(iteration) {}
    long iteration() const noexcept { return iteration_; }

private:
    long iteration_;
};

/// Metric requested on inputs where it is not defined (e.g. HD95 of an empty mask).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Filesystem failures: unreadable or unwritable paths.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace abdkit
