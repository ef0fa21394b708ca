#pragma once

#include <stdexcept>
#include <string>

namespace clmtt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Division by a vanishing quantity.
class SingularityError : public Error {
public:
    using Error::Error;
};

/// Mismatched lengths, mode sizes or ranks.
class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// No steady operating point exists inside the feasible slip range.
class InfeasibleInitializationError : public Error {
public:
    using Error::Error;
};

/// A simulated state left the feasible box.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& variable, const std::string& what)
        : Error(what), variable_(variable) {}
    const std::string& variable() const noexcept { return variable_; }

private:
    std::string variable_;
};

/// Dense materialization refused because it would exceed the size guard.
class SizeGuardError : public Error {
public:
    using Error::Error;
};

/// Black-box function returned a non-finite value.
class EvaluationError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// Operator assembly exceeded the configured TT rank.
class RankOverflowError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace clmtt
