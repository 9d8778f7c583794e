// SPDX-License-Identifier: Apache-2.0
#include "trajattr/mask.hpp"

#include <cmath>

#include "trajattr/errors.hpp"

namespace trajattr {

void Mask::restrict(std::span<const double> x, std::span<double> out) const {
    if (x.size() != full_dim || out.size() != indices.size())
        throw invalid_input_error("Mask::restrict: dimension mismatch");
    for (std::size_t k = 0; k < indices.size(); ++k) out[k] = x[indices[k]];
}

Vec Mask::restrict(std::span<const double> x) const {
    Vec out(indices.size(), 0.0);
    restrict(x, out);
    return out;
}

void Mask::scatter(std::span<const double> masked,
                   std::span<double> full) const {
    if (masked.size() != indices.size() || full.size() != full_dim)
        throw invalid_input_error("Mask::scatter: dimension mismatch");
    for (std::size_t k = 0; k < indices.size(); ++k)
        full[indices[k]] = masked[k];
}

Mask build_mask(std::uint32_t p, double keep_ratio, RngStream rng) {
    if (keep_ratio <= 0.0 || keep_ratio > 1.0)
        throw invalid_input_error("build_mask: keep_ratio must be in (0, 1]");
    const auto k = static_cast<std::uint32_t>(
        std::min<double>(p, std::llround(keep_ratio * p)));
    Mask mask;
    mask.keep_ratio = keep_ratio;
    mask.seed = rng.seed;
    mask.stream_id = rng.stream_id;
    mask.full_dim = p;
    if (k == p) {
        mask.indices.resize(p);
        for (std::uint32_t i = 0; i < p; ++i) mask.indices[i] = i;
    } else {
        RngCursor cursor(rng);
        mask.indices = sample_without_replacement(p, k, cursor);
    }
    return mask;
}

}  // namespace trajattr
