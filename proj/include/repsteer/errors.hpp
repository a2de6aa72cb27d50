#pragma once

#include <stdexcept>
#include <string>

namespace repsteer {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError / CheckpointError -> 3, NumericError -> 4.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

}  // namespace repsteer
