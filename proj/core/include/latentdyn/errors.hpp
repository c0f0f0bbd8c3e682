#pragma once

#include <stdexcept>
#include <string>

namespace latentdyn {

/// File or stream failure. The message always names the offending path.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad configuration: unknown key, missing key, unparsable value.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numerical abort (NaN/Inf loss, non-normalizable marginal, ...).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Contract violation: mismatched shapes, invalid extents, bad arguments.
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

} // namespace latentdyn
