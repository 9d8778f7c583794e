// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trajattr/core_math.hpp"

namespace trajattr {

// Fixed random coordinate subset S of {0..p-1}; the entire attribution
// computation is restricted to it. Shared across all steps of one run.
struct Mask {
    std::vector<std::uint32_t> indices;  // sorted, unique
    double keep_ratio = 1.0;
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::uint32_t full_dim = 0;

    std::uint32_t size() const {
        return static_cast<std::uint32_t>(indices.size());
    }
    bool is_identity() const { return size() == full_dim; }

    // out[k] = x[indices[k]]
    void restrict(std::span<const double> x, std::span<double> out) const;
    Vec restrict(std::span<const double> x) const;
    // Writes the masked entries back into a full-dimensional vector.
    void scatter(std::span<const double> masked, std::span<double> full) const;
};

// Uniform sample of round(keep_ratio * p) coordinates without replacement.
Mask build_mask(std::uint32_t p, double keep_ratio, RngStream rng);

}  // namespace trajattr
