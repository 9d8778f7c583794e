// SPDX-License-Identifier: Apache-2.0
//
// Dense vector/matrix kernels, counter-based random streams, and rank
// statistics shared by every other module. Everything here is pure and
// deterministic; no threading, no hidden state.
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace trajattr {

using Vec = std::vector<double>;

// ----------------------------- vector kernels -----------------------------

double dot(std::span<const double> a, std::span<const double> b);
double nrm2(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale(std::span<double> x, double alpha);
void fill(std::span<double> x, double value);

bool all_finite(std::span<const double> x);
// Throws numeric_error mentioning `context` if any entry is NaN/Inf.
void require_finite(std::span<const double> x, std::string_view context);

// Row-major dense matrix. Just enough for the summary-matrix block algebra;
// deliberately not a general BLAS.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    static Mat identity(std::size_t n);

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<const double> row_span(std::size_t i) const {
        return {row(i), cols};
    }
};

// out = M * x
void matvec(const Mat& m, std::span<const double> x, std::span<double> out);
// M += alpha * u * v^T
void rank_one_update(Mat& m, double alpha, std::span<const double> u,
                     std::span<const double> v);

// ----------------------------- random streams -----------------------------

// Counter-based stream: (seed, stream_id, index) fully determines every
// draw, so any consumer can be replayed in isolation. Distinct stream ids
// derived from one seed are treated as independent.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    std::uint64_t u64_at(std::uint64_t index) const;
    // Uniform in [0, 1).
    double uniform_at(std::uint64_t index) const;

    // Named substream, e.g. derive("mask") or derive("epoch", 3).
    RngStream derive(std::string_view name) const;
    RngStream derive(std::string_view name, std::uint64_t k) const;
};

// Stateful cursor over a stream for sequential consumption.
class RngCursor {
  public:
    explicit RngCursor(RngStream stream) : stream_(stream) {}

    std::uint64_t next_u64() { return stream_.u64_at(index_++); }
    double uniform() { return stream_.uniform_at(index_++); }
    // Standard normal (Box-Muller, consumes two indices).
    double normal();
    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

  private:
    RngStream stream_;
    std::uint64_t index_ = 0;
};

// In-place Fisher-Yates driven by the cursor.
void shuffle(std::vector<std::uint32_t>& ids, RngCursor& rng);
// k distinct indices from {0..n-1}, sorted ascending.
std::vector<std::uint32_t> sample_without_replacement(std::uint32_t n,
                                                      std::uint32_t k,
                                                      RngCursor& rng);

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

// ----------------------------- rank statistics ----------------------------

// Average ranks (1-based); ties receive the mean of their rank range.
Vec average_ranks(std::span<const double> xs);

// Spearman rank correlation with average ranks for ties.
// Throws invalid_input_error on length mismatch or n < 2, and
// undefined_correlation_error when either rank variance is zero.
double spearman_rho(std::span<const double> xs, std::span<const double> ys);

// Trailing mean over `window` entries, truncated at the left boundary.
Vec rolling_mean(std::span<const double> xs, std::size_t window);

}  // namespace trajattr
