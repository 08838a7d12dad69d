#pragma once

#include <stdexcept>
#include <string>

namespace ctr {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis mismatches between tensors or layers.
struct dimension_error : error {
    using error::error;
};

// A caller violated an operation's contract (non-scalar loss, reused tape, ...).
struct contract_error : error {
    using error::error;
};

// A layer or model was assembled with inconsistent options.
struct configuration_error : error {
    using error::error;
};

// Unknown named entity (graph name, variant, ...).
struct lookup_error : error {
    using error::error;
};

// Malformed file on disk.
struct format_error : error {
    using error::error;
};

// Index outside a valid range.
struct range_error : error {
    using error::error;
};

} // namespace ctr
