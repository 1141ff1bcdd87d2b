#pragma once

#include <stdexcept>
#include <string>

namespace neuromatch {

// Operand shapes do not fit a primitive's signature.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Value outside a primitive's numeric domain (log of x <= 0, zero-norm row, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Bad or unreadable input data: manifests, images, checkpoints.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration or request (unknown policy, infeasible parameters).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace neuromatch
