#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mixcert {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A component density violates its invariants (non-finite, asymmetric, not PD).
class InvalidModel : public Error {
public:
    using Error::Error;
};

class ResourceLimit : public Error {
public:
    ResourceLimit(const std::string& what, std::size_t required)
        : Error(what), required_(required) {}
    std::size_t required() const noexcept { return required_; }

private:
    std::size_t required_;
};

class NumericalFailure : public Error {
public:
    NumericalFailure(const std::string& what, std::size_t iteration)
        : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// The upper bound is indistinguishable from the random baseline.
class DegenerateCalibration : public Error {
public:
    using Error::Error;
};

/// Inputs to certification were computed on different data or model sets.
class InconsistentInputs : public Error {
public:
    using Error::Error;
};

}  // namespace mixcert
