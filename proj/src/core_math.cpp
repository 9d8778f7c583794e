// SPDX-License-Identifier: Apache-2.0
#include "trajattr/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trajattr/errors.hpp"

namespace trajattr {

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw invalid_input_error("dot: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double nrm2(std::span<const double> a) {
    double acc = 0.0;
    for (double x : a) acc += x * x;
    return std::sqrt(acc);
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size())
        throw invalid_input_error("axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

void fill(std::span<double> x, double value) {
    for (double& v : x) v = value;
}

bool all_finite(std::span<const double> x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_finite(std::span<const double> x, std::string_view context) {
    if (!all_finite(x))
        throw numeric_error("non-finite value in " + std::string(context));
}

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

void matvec(const Mat& m, std::span<const double> x, std::span<double> out) {
    if (x.size() != m.cols || out.size() != m.rows)
        throw invalid_input_error("matvec: dimension mismatch");
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* r = m.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += r[j] * x[j];
        out[i] = acc;
    }
}

void rank_one_update(Mat& m, double alpha, std::span<const double> u,
                     std::span<const double> v) {
    if (u.size() != m.rows || v.size() != m.cols)
        throw invalid_input_error("rank_one_update: dimension mismatch");
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double au = alpha * u[i];
        double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += au * v[j];
    }
}

// ----------------------------- random streams -----------------------------

namespace {

// SplitMix64 finalizer; full avalanche per application.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::u64_at(std::uint64_t index) const {
    std::uint64_t h = mix64(seed ^ 0x8CB92BA72F3D8DD7ULL);
    h = mix64(h ^ stream_id);
    h = mix64(h ^ index);
    return h;
}

double RngStream::uniform_at(std::uint64_t index) const {
    return static_cast<double>(u64_at(index) >> 11) * 0x1.0p-53;
}

RngStream RngStream::derive(std::string_view name) const {
    return RngStream{seed, mix64(stream_id ^ fnv1a64(name))};
}

RngStream RngStream::derive(std::string_view name, std::uint64_t k) const {
    return RngStream{seed, mix64(mix64(stream_id ^ fnv1a64(name)) ^ k)};
}

double RngCursor::normal() {
    // u1 in (0, 1] so the log never sees zero.
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t RngCursor::below(std::uint64_t bound) {
    return bound == 0 ? 0 : next_u64() % bound;
}

void shuffle(std::vector<std::uint32_t>& ids, RngCursor& rng) {
    for (std::size_t i = ids.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(ids[i - 1], ids[j]);
    }
}

std::vector<std::uint32_t> sample_without_replacement(std::uint32_t n,
                                                      std::uint32_t k,
                                                      RngCursor& rng) {
    if (k > n)
        throw invalid_input_error("sample_without_replacement: k > n");
    std::vector<std::uint32_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0u);
    // Partial Fisher-Yates: first k entries are the sample.
    for (std::uint32_t i = 0; i < k; ++i) {
        const std::uint32_t j =
            i + static_cast<std::uint32_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    return fnv1a64(bytes.data(), bytes.size());
}

std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                      std::uint64_t basis) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = basis;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ----------------------------- rank statistics ----------------------------

Vec average_ranks(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    Vec ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        // Tie block [i, j]: mean of 1-based ranks i+1..j+1.
        const double r = 0.5 * (static_cast<double>(i + 1) +
                                static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size())
        throw invalid_input_error("spearman_rho: length mismatch");
    if (xs.size() < 2)
        throw invalid_input_error("spearman_rho: need at least 2 points");
    if (!all_finite(xs) || !all_finite(ys))
        throw invalid_input_error("spearman_rho: non-finite input");

    const Vec rx = average_ranks(xs);
    const Vec ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mean = (n + 1.0) / 2.0;

    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = rx[i] - mean;
        const double dy = ry[i] - mean;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw undefined_correlation_error(
            "spearman_rho: zero rank variance");
    return sxy / std::sqrt(sxx * syy);
}

Vec rolling_mean(std::span<const double> xs, std::size_t window) {
    if (window == 0)
        throw invalid_input_error("rolling_mean: window must be >= 1");
    Vec out(xs.size(), 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
        double acc = 0.0;
        for (std::size_t k = lo; k <= i; ++k) acc += xs[k];
        out[i] = acc / static_cast<double>(i - lo + 1);
    }
    return out;
}

}  // namespace trajattr
