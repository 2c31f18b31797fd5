#pragma once

#include <stdexcept>
#include <string>

namespace btl {

// Invalid configuration or invariant violation detected before any compute.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or size mismatch between two objects; the message names the offending
// dimension on both sides.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File or stream failure; the message carries the path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input data (CSV, binary container); the message names the location.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite or runaway energy during optimization/sampling.
struct DivergenceError : std::runtime_error {
    DivergenceError(int step_index, double energy_value, const std::string& msg)
        : std::runtime_error(msg), step(step_index), energy(energy_value) {}
    int step;
    double energy;
};

}  // namespace btl
