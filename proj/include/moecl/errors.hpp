#pragma once

#include <stdexcept>
#include <string>

namespace moecl {

// Base for everything this library throws on contract violations.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes incompatible with an operation. Message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (NaN into softmax, diverged loss, ...).
struct NumericError : Error {
    using Error::Error;
};

// Out-of-range index (class label, task id, token id above vocab size, ...).
struct IndexError : Error {
    using Error::Error;
};

// Invalid configuration field or field combination.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input data (JSONL parse or validation failure); message carries the line number.
struct DataError : Error {
    using Error::Error;
};

// Malformed or truncated checkpoint file.
struct FormatError : Error {
    using Error::Error;
};

// API misuse: preconditions broken at call boundaries (empty sequence, non-scalar loss, ...).
struct ContractError : Error {
    using Error::Error;
};

// Training loss left the finite range; message names the failing step.
struct DivergedError : NumericError {
    using NumericError::NumericError;
};

}  // namespace moecl
