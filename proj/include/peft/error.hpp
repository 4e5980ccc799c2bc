#pragma once

#include <stdexcept>
#include <string>

namespace peft {

// Base type for all library errors. Subclasses exist so callers (and the
// CLI exit-code mapping) can tell data problems apart from API misuse.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

// Input data problems: empty corpus, bad tags, undecodable text.
struct DataError : Error {
    using Error::Error;
};

// Malformed or truncated files; message carries a byte offset or line number.
struct FormatError : Error {
    using Error::Error;
};

// Artifact built for a different model (fingerprint mismatch).
struct CompatError : Error {
    using Error::Error;
};

// API contract violation (non-scalar backward, baseline mode with adapters).
struct ContractError : Error {
    using Error::Error;
};

// Non-finite loss or gradient during training.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace peft
