#pragma once

#include <stdexcept>
#include <string>

namespace kvlink {

// Exception hierarchy maps onto the CLI exit-code buckets:
//   IoError/FormatError -> 1, ValidationError -> 2, StoreError -> 3,
//   VocabError -> 4. Verification failure (exit 5) is a result, not a throw.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : Error {
    using Error::Error;
};

// Bad magic, wrong version, truncated payload.
struct FormatError : IoError {
    using IoError::IoError;
};

struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

struct PositionError : ValidationError {
    using ValidationError::ValidationError;
};

struct PlanError : ValidationError {
    using ValidationError::ValidationError;
};

struct RuleError : ValidationError {
    using ValidationError::ValidationError;
};

// A softmax row with no allowed entry.
struct DegenerateRowError : ValidationError {
    using ValidationError::ValidationError;
};

struct EmptyInputError : ValidationError {
    using ValidationError::ValidationError;
};

struct StoreError : Error {
    using Error::Error;
};

// A single cache larger than the store budget.
struct CapacityError : StoreError {
    using StoreError::StoreError;
};

// Cache produced by a different model than the store serves.
struct CompatError : StoreError {
    using StoreError::StoreError;
};

// CRC mismatch on a stored cache file.
struct IntegrityError : StoreError {
    using StoreError::StoreError;
};

struct VocabError : Error {
    using Error::Error;
};

}  // namespace kvlink
