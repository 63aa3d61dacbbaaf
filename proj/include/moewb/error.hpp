// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moewb {

// Error taxonomy used across the workbench. Every throwing operation
// documents which of these it raises.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension / shape mismatch between operands.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument or input value (out-of-range k, bad token id, ...).
struct ArgumentError : Error {
    explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

// Numerical failure (factorization breakdown after damping, ...).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Internal bookkeeping mismatch (count sums, trace alignment, ...).
struct ConsistencyError : Error {
    explicit ConsistencyError(const std::string& msg) : Error(msg) {}
};

// Filesystem / serialization failure, including checkpoint load errors.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace moewb
