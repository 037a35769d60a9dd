// Error taxonomy shared across the library. The CLI maps these to exit codes:
// UsageError -> 1, DataError -> 2, NumericError -> 3.
#pragma once

#include <stdexcept>

namespace evomerge {

// Bad invocation: unknown flags, missing arguments, malformed config.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent inputs: datasets, registries, checkpoints whose
// contents violate a contract.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Runtime numerical failure: diverged training, non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace evomerge
