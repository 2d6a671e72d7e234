#pragma once

#include <stdexcept>
#include <string>

namespace cohesion {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& message) : std::runtime_error(message) {}
};

/// Shape or axis mismatch between tensors.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& message) : Error(message) {}
};

/// Invalid configuration value (non-positive iteration count, bad batch size, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error(message) {}
};

/// An operation was called outside its documented contract.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& message) : Error(message) {}
};

/// Class or element index out of range.
class IndexError : public Error {
public:
    explicit IndexError(const std::string& message) : Error(message) {}
};

/// An operation produced NaN/Inf from finite inputs (overflow is an error, not silent).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error(message) {}
};

/// File or stream level failure (missing file, malformed record, ...).
class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(message) {}
};

/// The face-level pipeline was handed a sample with no faces.
class NoFacesError : public Error {
public:
    explicit NoFacesError(const std::string& message) : Error(message) {}
};

/// Mask-dependent operation called on a sample without a person mask.
class MissingMaskError : public Error {
public:
    explicit MissingMaskError(const std::string& message) : Error(message) {}
};

/// Weighted kappa is undefined (chance agreement equals 1).
class UndefinedKappaError : public Error {
public:
    explicit UndefinedKappaError(const std::string& message) : Error(message) {}
};

/// Training aborted because the loss became non-finite.
class TrainingDivergedError : public Error {
public:
    TrainingDivergedError(const std::string& message, int epoch, int batch)
        : Error(message), epoch(epoch), batch(batch) {}
    int epoch;
    int batch;
};

}  // namespace cohesion
