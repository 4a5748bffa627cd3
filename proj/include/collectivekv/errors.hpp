#pragma once

#include <stdexcept>
#include <string>

namespace ckv {

// Error hierarchy mapped onto the CLI exit-code contract:
//   usage_error -> 2, numeric_error -> 3, io_error -> 4.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration, bad arguments, violated preconditions.
struct usage_error : error {
    using error::error;
};

// Dimension mismatches between operands.
struct shape_error : usage_error {
    using usage_error::usage_error;
};

// NaN/Inf appearance, divergence, or a metric that is undefined on the
// given data (e.g. AUC of a single-class batch).
struct numeric_error : error {
    using error::error;
};

struct metric_error : numeric_error {
    using numeric_error::numeric_error;
};

struct io_error : error {
    using error::error;
};

// Decode requested for a user that was never prefilled.
struct cache_miss_error : io_error {
    using io_error::io_error;
};

}  // namespace ckv
