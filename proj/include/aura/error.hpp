#pragma once

#include <stdexcept>
#include <string>

namespace aura {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration values, unknown config keys, bad CLI input.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Mismatched tensor or raster shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Values outside the domain of an operation (NaN, out of [0,1], ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Dataset ingestion and file I/O failures.
class DataError : public Error {
public:
    using Error::Error;
};

/// Checkpoints and weight archives: layout mismatch, corruption, checksum failure.
class ArchiveError : public Error {
public:
    using Error::Error;
};

/// Raised when training produces a non-finite loss.
class TrainingError : public Error {
public:
    using Error::Error;
};

} // namespace aura
