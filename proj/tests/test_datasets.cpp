// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "trajattr/datasets.hpp"
#include "trajattr/errors.hpp"

using namespace trajattr;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("datasets");

TEST_CASE("zero spread collapses clusters onto their centers") {
    const Dataset data = gen_blobs(4, 2, 2, 0.0, RngStream{7, 0});
    // Labels round-robin: samples 0,2 are class 0; 1,3 are class 1.
    CHECK(data.labels == std::vector<std::uint32_t>{0, 1, 0, 1});
    for (std::uint32_t j = 0; j < 2; ++j) {
        CHECK(data.row(0)[j] == data.row(2)[j]);
        CHECK(data.row(1)[j] == data.row(3)[j]);
    }
    CHECK(data.row(0)[0] != data.row(1)[0]);
}

TEST_CASE("blob generation is byte-identical across calls") {
    const Dataset a = gen_blobs(100, 2, 2, 0.5, RngStream{1, 0});
    const Dataset b = gen_blobs(100, 2, 2, 0.5, RngStream{1, 0});
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
}

namespace {

// Independent classifier oracle: one-vs-all ridge regression on the raw
// features, solved by the normal equations (d is tiny so a dense solve by
// Gaussian elimination is fine).
double ridge_accuracy(const Dataset& data) {
    const std::size_t d = data.d + 1;  // bias column
    std::vector<double> xtx(d * d, 0.0);
    std::vector<std::vector<double>> xty(data.num_classes,
                                         std::vector<double>(d, 0.0));
    for (std::uint32_t i = 0; i < data.n; ++i) {
        std::vector<double> x(d, 1.0);
        for (std::uint32_t j = 0; j < data.d; ++j) x[j] = data.row(i)[j];
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) xtx[a * d + b] += x[a] * x[b];
            for (std::uint32_t c = 0; c < data.num_classes; ++c)
                xty[c][a] += x[a] * (data.labels[i] == c ? 1.0 : -1.0);
        }
    }
    for (std::size_t a = 0; a < d; ++a) xtx[a * d + a] += 1e-6;

    // Solve xtx * w_c = xty_c for each class.
    std::vector<std::vector<double>> w(data.num_classes);
    for (std::uint32_t c = 0; c < data.num_classes; ++c) {
        std::vector<double> m = xtx, rhs = xty[c];
        for (std::size_t col = 0; col < d; ++col) {
            std::size_t piv = col;
            for (std::size_t r = col + 1; r < d; ++r)
                if (std::abs(m[r * d + col]) > std::abs(m[piv * d + col]))
                    piv = r;
            for (std::size_t j2 = 0; j2 < d; ++j2)
                std::swap(m[col * d + j2], m[piv * d + j2]);
            std::swap(rhs[col], rhs[piv]);
            for (std::size_t r = 0; r < d; ++r) {
                if (r == col) continue;
                const double f = m[r * d + col] / m[col * d + col];
                for (std::size_t j2 = 0; j2 < d; ++j2)
                    m[r * d + j2] -= f * m[col * d + j2];
                rhs[r] -= f * rhs[col];
            }
        }
        w[c].resize(d);
        for (std::size_t j2 = 0; j2 < d; ++j2)
            w[c][j2] = rhs[j2] / m[j2 * d + j2];
    }

    std::uint32_t hits = 0;
    for (std::uint32_t i = 0; i < data.n; ++i) {
        double best = -1e300;
        std::uint32_t arg = 0;
        for (std::uint32_t c = 0; c < data.num_classes; ++c) {
            double score = w[c][data.d];
            for (std::uint32_t j = 0; j < data.d; ++j)
                score += w[c][j] * data.row(i)[j];
            if (score > best) {
                best = score;
                arg = c;
            }
        }
        if (arg == data.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / data.n;
}

}  // namespace

TEST_CASE("blobs at moderate spread are linearly separable") {
    const Dataset data = gen_blobs(100, 2, 2, 0.5, RngStream{1, 0});
    CHECK(ridge_accuracy(data) > 0.9);
}

TEST_CASE("gen_blobs input validation") {
    CHECK_THROWS_AS(gen_blobs(1, 2, 2, 0.5, RngStream{0, 0}),
                    invalid_input_error);
    CHECK_THROWS_AS(gen_blobs(10, 0, 2, 0.5, RngStream{0, 0}),
                    invalid_input_error);
}

namespace {

void write_be32(std::ofstream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxFixture {
    std::string images = "idx_images_test.bin";
    std::string labels = "idx_labels_test.bin";
    IdxFixture(std::uint32_t n_img, std::uint32_t n_lab, bool bad_magic = false,
               bool truncate = false) {
        std::ofstream img(images, std::ios::binary);
        write_be32(img, bad_magic ? 0x12345678u : 0x00000803u);
        write_be32(img, n_img);
        write_be32(img, 28);
        write_be32(img, 28);
        std::vector<unsigned char> zeros(784, 0);
        const std::uint32_t payload = truncate && n_img > 0 ? n_img - 1 : n_img;
        for (std::uint32_t i = 0; i < payload; ++i)
            img.write(reinterpret_cast<const char*>(zeros.data()), 784);
        std::ofstream lab(labels, std::ios::binary);
        write_be32(lab, 0x00000801u);
        write_be32(lab, n_lab);
        for (std::uint32_t i = 0; i < n_lab; ++i) {
            const char y = static_cast<char>(i % 10);
            lab.write(&y, 1);
        }
    }
    ~IdxFixture() {
        fs::remove(images);
        fs::remove(labels);
    }
};

}  // namespace

TEST_CASE("idx loader: single all-zero image") {
    IdxFixture fx(1, 1);
    const Dataset data = load_idx(fx.images, fx.labels);
    CHECK(data.n == 1);
    CHECK(data.d == 784);
    for (std::uint32_t j = 0; j < 784; ++j) CHECK(data.row(0)[j] == 0.0);
}

TEST_CASE("idx loader: count mismatch names both counts") {
    IdxFixture fx(3, 2);
    CHECK_THROWS_WITH_AS(load_idx(fx.images, fx.labels),
                         doctest::Contains("count mismatch"), format_error);
}

TEST_CASE("idx loader: bad magic") {
    IdxFixture fx(1, 1, /*bad_magic=*/true);
    CHECK_THROWS_WITH_AS(load_idx(fx.images, fx.labels),
                         doctest::Contains("magic"), format_error);
}

TEST_CASE("idx loader: truncated payload names the record") {
    IdxFixture fx(2, 2, false, /*truncate=*/true);
    CHECK_THROWS_WITH_AS(load_idx(fx.images, fx.labels),
                         doctest::Contains("truncated"), format_error);
}

TEST_CASE("schedule partitions ids when batch divides n") {
    const BatchSchedule s = make_schedule(4, 2, 1, RngStream{0, 0});
    REQUIRE(s.num_steps() == 2);
    std::set<std::uint32_t> seen;
    for (const auto& step : s.steps) {
        CHECK(step.size() == 2);
        seen.insert(step.begin(), step.end());
    }
    CHECK(seen == std::set<std::uint32_t>{0, 1, 2, 3});
}

TEST_CASE("schedule drops the partial final batch") {
    const BatchSchedule s = make_schedule(5, 2, 1, RngStream{0, 0});
    CHECK(s.num_steps() == 2);  // one id dropped
}

TEST_CASE("each epoch is a fresh permutation covering all ids") {
    const BatchSchedule s = make_schedule(8, 4, 3, RngStream{9, 0});
    REQUIRE(s.num_steps() == 6);
    for (std::uint32_t e = 0; e < 3; ++e) {
        std::set<std::uint32_t> seen;
        for (std::uint32_t b = 0; b < 2; ++b)
            seen.insert(s.steps[e * 2 + b].begin(), s.steps[e * 2 + b].end());
        CHECK(seen.size() == 8);
    }
}

TEST_CASE("schedule replay is element-wise identical") {
    const BatchSchedule a = make_schedule(64, 8, 2, RngStream{5, 11});
    const BatchSchedule b = make_schedule(64, 8, 2, RngStream{5, 11});
    CHECK(a.steps == b.steps);
    for (const auto& step : a.steps)
        for (auto id : step) CHECK(id < 64);
}

TEST_CASE("schedule rejects batch larger than n") {
    CHECK_THROWS_AS(make_schedule(4, 8, 1, RngStream{0, 0}),
                    invalid_input_error);
}

TEST_CASE("label noise flips the requested fraction deterministically") {
    Dataset a = gen_blobs(100, 2, 4, 0.3, RngStream{3, 0});
    Dataset b = gen_blobs(100, 2, 4, 0.3, RngStream{3, 0});
    const auto flipped_a = flip_labels(a, 0.1, RngStream{4, 0});
    const auto flipped_b = flip_labels(b, 0.1, RngStream{4, 0});
    CHECK(flipped_a == flipped_b);
    CHECK(flipped_a.size() == 10);
    const Dataset clean = gen_blobs(100, 2, 4, 0.3, RngStream{3, 0});
    for (auto id : flipped_a) CHECK(a.labels[id] != clean.labels[id]);
}

TEST_CASE("dataset binary round-trip") {
    const Dataset a = gen_blobs(20, 3, 2, 0.4, RngStream{8, 0});
    save_dataset(a, "ds_roundtrip_test.bin");
    const Dataset b = load_dataset("ds_roundtrip_test.bin");
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    CHECK(a.num_classes == b.num_classes);
    fs::remove("ds_roundtrip_test.bin");
}

TEST_SUITE_END();
