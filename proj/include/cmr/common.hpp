#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmr {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension / shape violations (e.g. matmul inner-dim mismatch).
struct ShapeError : Error {
    using Error::Error;
};

/// Bad argument values: ids out of range, empty inputs, invalid config.
struct ValueError : Error {
    using Error::Error;
};

/// Non-finite results where finiteness is part of the contract.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace cmr
