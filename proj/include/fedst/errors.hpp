#pragma once

#include <stdexcept>
#include <string>

namespace fedst {

// Error taxonomy. The CLI maps these onto exit codes: config 2, protocol 3,
// data 4, everything else 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or divisibility violation in a tensor operation.
struct DimensionError : Error {
    using Error::Error;
};

// API misuse: non-scalar loss, optimizer fed a tensor without gradients, ...
struct ContractError : Error {
    using Error::Error;
};

// Invalid run configuration (bad key, out-of-range value, missing file).
struct ConfigError : Error {
    using Error::Error;
};

// Wire / round-protocol violation (bad checksum, private path in payload,
// round skew, missing site).
struct ProtocolError : Error {
    using Error::Error;
};

// Bad dataset contents (label out of range, truncated file).
struct DataError : Error {
    using Error::Error;
};

// NaN or Inf escaped an operation.
struct NumericError : Error {
    using Error::Error;
};

} // namespace fedst
