#pragma once

#include <stdexcept>
#include <string>

namespace wdstagnn {

/// Raised when array extents are incompatible with an operation.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised for scalar settings outside their valid range.
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an API precondition (e.g. backward on a non-scalar).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Raised when optimisation produces non-finite values.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised for malformed or missing input files.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace wdstagnn
