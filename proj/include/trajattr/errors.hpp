// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace trajattr {

// Bad argument values, dimension mismatches, out-of-range ratios.
struct invalid_input_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf reached a place it must not be.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rank correlation is undefined (zero rank variance).
struct undefined_correlation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// On-disk artifact is malformed (bad magic, checksum, truncation, version).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem-level failure.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A required upstream artifact is missing; names the command that produces it.
struct dependency_error : std::runtime_error {
    dependency_error(const std::string& what, std::string producer)
        : std::runtime_error(what), producing_command(std::move(producer)) {}
    std::string producing_command;
};

}  // namespace trajattr
