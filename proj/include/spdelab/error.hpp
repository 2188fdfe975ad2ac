#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spdelab {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid geometry or discretization parameters.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid model configuration (noise spectrum, nonlinearity, system).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A linear system that could not be factorized.
class SingularSystemError : public Error {
public:
    using Error::Error;
};

/// Eigen-solver or other diagnostics failure.
class DiagnosticsError : public Error {
public:
    using Error::Error;
};

/// Two records that should share a time grid / mesh do not.
class GridMismatchError : public Error {
public:
    using Error::Error;
};

/// Blow-up guard tripped while stepping a path.
class PathFailure : public Error {
public:
    PathFailure(std::size_t step, const std::string& what)
        : Error("path failure at step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Minimum-norm control could not reach the target within tolerance.
class InfeasibleTargetError : public Error {
public:
    using Error::Error;
};

/// Too few usable points for a regression or confidence interval.
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// More than half the paths failed at some epsilon.
class DegradedEnsembleError : public Error {
public:
    using Error::Error;
};

} // namespace spdelab
