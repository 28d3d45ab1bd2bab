#pragma once

#include <stdexcept>
#include <string>

namespace pmeta {

// Error taxonomy shared by all modules. Exceptions carry a fully formatted
// message; callers that need to distinguish categories catch the subtype.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / dimension mismatch in tensor ops.
struct ShapeError : Error {
    using Error::Error;
};

// Numeric-domain violations and non-finite values produced by an op.
struct NumericError : Error {
    using Error::Error;
};

// Precondition / API-contract violations.
struct ContractError : Error {
    using Error::Error;
};

// Not enough labels or examples to satisfy a sampling request.
struct CapacityError : Error {
    using Error::Error;
};

// Malformed input file (JSONL, config, template).
struct ParseError : Error {
    using Error::Error;
};

// Filesystem-level failures.
struct IoError : Error {
    using Error::Error;
};

// Corrupt or truncated persisted state.
struct IntegrityError : Error {
    using Error::Error;
};

// Persisted state written by an incompatible format version.
struct VersionError : Error {
    using Error::Error;
};

}  // namespace pmeta
