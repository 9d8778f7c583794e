// SPDX-License-Identifier: Apache-2.0
//
// Synthetic blob generation, IDX (MNIST-format) ingestion, and deterministic
// batch schedules.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trajattr/core_math.hpp"

namespace trajattr {

struct Dataset {
    Vec features;  // n x d, row-major
    std::vector<std::uint32_t> labels;
    std::uint32_t n = 0;
    std::uint32_t d = 0;
    std::uint32_t num_classes = 0;

    std::span<const double> row(std::uint32_t i) const {
        return {features.data() + static_cast<std::size_t>(i) * d, d};
    }
    // Contiguous slice [begin, begin+count).
    Dataset slice(std::uint32_t begin, std::uint32_t count) const;
};

struct BatchSchedule {
    std::vector<std::vector<std::uint32_t>> steps;  // steps[t] has batch_size ids
    std::uint32_t batch_size = 0;
    std::uint32_t epochs = 0;
    std::uint64_t shuffle_seed = 0;

    std::uint32_t num_steps() const {
        return static_cast<std::uint32_t>(steps.size());
    }
};

// Class-conditional Gaussian clusters; centers drawn once from the seed.
// Labels are assigned round-robin so any contiguous slice stays balanced.
Dataset gen_blobs(std::uint32_t n, std::uint32_t d, std::uint32_t classes,
                  double spread, RngStream rng);

// IDX pair loader (big-endian headers, uint8 payload). Pixels scaled to [0,1].
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

// epochs * floor(n / batch_size) steps; each epoch a fresh seeded permutation,
// partial final batch dropped.
BatchSchedule make_schedule(std::uint32_t n, std::uint32_t batch_size,
                            std::uint32_t epochs, RngStream rng);

// Flips a deterministic random fraction of labels to a different class.
// Returns the flipped ids (sorted).
std::vector<std::uint32_t> flip_labels(Dataset& data, double fraction,
                                       RngStream rng);

// Binary round-trip for generated datasets (CLI plumbing).
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace trajattr
