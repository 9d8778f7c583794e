// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "trajattr/errors.hpp"
#include "trajattr/models.hpp"

using namespace trajattr;

TEST_SUITE_BEGIN("models");

namespace {

Dataset tiny_data(std::uint32_t n, std::uint32_t d, std::uint32_t classes,
                  std::uint64_t seed) {
    return gen_blobs(n, d, classes, 0.8, RngStream{seed, 0});
}

Model logistic_model(std::uint32_t d, std::uint32_t classes,
                     std::uint64_t seed = 1) {
    ModelSpec spec;
    spec.kind = ModelKind::logistic;
    spec.layer_dims = {d, classes};
    spec.init_seed = seed;
    return Model(spec);
}

Model mlp_model(std::uint32_t d, std::uint32_t hidden, std::uint32_t classes,
                std::uint64_t seed = 1) {
    ModelSpec spec;
    spec.kind = ModelKind::mlp;
    spec.layer_dims = {d, hidden, classes};
    spec.init_seed = seed;
    return Model(spec);
}

}  // namespace

TEST_CASE("zero parameters give log(num_classes) loss") {
    const Dataset data = tiny_data(6, 3, 2, 5);
    const Model logistic = logistic_model(3, 2);
    const Vec zeros_l(logistic.param_dim(), 0.0);
    for (std::uint32_t i = 0; i < data.n; ++i)
        CHECK(logistic.loss(zeros_l, data, i) ==
              doctest::Approx(std::log(2.0)).epsilon(1e-15));

    const Dataset data4 = tiny_data(6, 3, 4, 6);
    const Model mlp = mlp_model(3, 5, 4);
    const Vec zeros_m(mlp.param_dim(), 0.0);
    for (std::uint32_t i = 0; i < data4.n; ++i)
        CHECK(mlp.loss(zeros_m, data4, i) ==
              doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("loss matches an extended-precision softmax oracle") {
    const Dataset data = tiny_data(8, 4, 3, 17);
    const Model model = mlp_model(4, 6, 3, 17);
    Vec theta = model.init_params();
    RngCursor rng(RngStream{23, 0});
    for (double& x : theta) x += 0.3 * rng.normal();

    for (std::uint32_t i = 0; i < data.n; ++i) {
        // Recompute the forward pass in long double.
        const auto& dims = model.spec().layer_dims;
        std::vector<long double> act(data.row(i).begin(), data.row(i).end());
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            std::vector<long double> next(dims[l + 1], 0.0L);
            for (std::uint32_t r = 0; r < dims[l + 1]; ++r) {
                long double acc = 0.0L;
                for (std::uint32_t c = 0; c < dims[l]; ++c)
                    acc += static_cast<long double>(
                               theta[off + r * dims[l] + c]) *
                           act[c];
                next[r] = acc;
            }
            off += dims[l] * dims[l + 1];
            for (std::uint32_t r = 0; r < dims[l + 1]; ++r)
                next[r] += static_cast<long double>(theta[off + r]);
            off += dims[l + 1];
            if (l + 2 < dims.size())
                for (auto& v : next) v = v > 0.0L ? v : 0.0L;
            act = std::move(next);
        }
        long double denom = 0.0L;
        for (auto v : act) denom += std::exp(v);
        const long double want =
            -(act[data.labels[i]] - std::log(denom));
        CHECK(model.loss(theta, data, i) ==
              doctest::Approx(static_cast<double>(want)).epsilon(1e-12));
    }
}

TEST_CASE("gradient check against central finite differences") {
    // Covers both model kinds over >= 100 random (theta, sample) draws.
    RngCursor rng(RngStream{31, 0});
    int draws = 0;
    for (int rep = 0; rep < 10; ++rep) {
        const Dataset data = tiny_data(6, 3, 3, 100 + rep);
        for (const bool mlp : {false, true}) {
            const Model model = mlp ? mlp_model(3, 4, 3, rep)
                                    : logistic_model(3, 3, rep);
            const std::uint32_t p = model.param_dim();
            Vec theta = model.init_params();
            for (double& x : theta) x += 0.5 * rng.normal();
            const std::uint32_t id = rep % data.n;
            Vec grad(p, 0.0);
            model.grad(theta, data, id, grad);

            const double h = 1e-5;
            double worst = 0.0;
            double scale = 1.0;
            Vec probe = theta;
            for (std::uint32_t j = 0; j < p; ++j) {
                probe[j] = theta[j] + h;
                const double up = model.loss(probe, data, id);
                probe[j] = theta[j] - h;
                const double dn = model.loss(probe, data, id);
                probe[j] = theta[j];
                const double fd = (up - dn) / (2.0 * h);
                worst = std::max(worst, std::abs(grad[j] - fd));
                scale = std::max(scale, std::abs(fd));
            }
            CHECK(worst <= 1e-6 * scale);
            ++draws;
            ++draws;  // a (theta, sample) draw per coordinate sweep is
                      // conservative; count both kinds
        }
    }
    CHECK(draws >= 20);
}

TEST_CASE("negation-closed balanced dataset has zero weight-row gradient") {
    // Dataset invariant under (x, y) -> (-x, 1-y): orbits of both label
    // orientations make every weight-row contribution cancel at theta = 0.
    Dataset data;
    data.n = 4;
    data.d = 2;
    data.num_classes = 2;
    data.features = {1.0, -2.0, -1.0, 2.0, 1.0, -2.0, -1.0, 2.0};
    data.labels = {0, 1, 1, 0};
    const Model model = logistic_model(2, 2);
    const Vec theta(model.param_dim(), 0.0);
    Vec g(model.param_dim(), 0.0);
    const std::vector<std::uint32_t> ids{0, 1, 2, 3};
    batch_grad(model, theta, data, ids, g);
    // Weight entries come first in the flat layout (2x2), biases last.
    for (int j = 0; j < 4; ++j) CHECK(g[j] == doctest::Approx(0.0));
}

TEST_CASE("batch of one equals the per-sample gradient") {
    const Dataset data = tiny_data(5, 3, 2, 3);
    const Model model = mlp_model(3, 4, 2);
    const Vec theta = model.init_params();
    Vec g1(model.param_dim(), 0.0), g2(model.param_dim(), 0.0);
    const std::vector<std::uint32_t> ids{2};
    batch_grad(model, theta, data, ids, g1);
    model.grad(theta, data, 2, g2);
    CHECK(g1 == g2);
    CHECK_THROWS_AS(batch_grad(model, theta, data, {}, g1),
                    invalid_input_error);
}

TEST_CASE("batch gradient is the mean of per-sample gradients") {
    const Dataset data = tiny_data(8, 3, 3, 9);
    const Model model = mlp_model(3, 4, 3, 9);
    const Vec theta = model.init_params();
    const std::vector<std::uint32_t> ids{0, 3, 5, 7};
    Vec g(model.param_dim(), 0.0);
    batch_grad(model, theta, data, ids, g);
    const Mat rows = per_sample_grads(model, theta, data, ids);
    for (std::uint32_t j = 0; j < model.param_dim(); ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows.rows; ++r) acc += rows.at(r, j);
        CHECK(g[j] == acc / 4.0);
    }
}

TEST_CASE("ggn_vec trivial cases and explicit-matrix oracle") {
    const Dataset data = tiny_data(6, 2, 3, 21);
    const Model model = logistic_model(2, 3, 21);  // p = 9
    const std::uint32_t p = model.param_dim();
    REQUIRE(p <= 20);
    const Vec theta = model.init_params();
    const std::vector<std::uint32_t> ids{0, 1, 2, 3};

    SUBCASE("v = 0 maps to 0") {
        const Vec out = ggn_vec(model, theta, data, ids, Vec(p, 0.0));
        for (double x : out) CHECK(x == 0.0);
    }
    SUBCASE("rank-one algebra on a single sample") {
        Vec gz(p, 0.0);
        model.grad(theta, data, 2, gz);
        const std::vector<std::uint32_t> one{2};
        const Vec out = ggn_vec(model, theta, data, one, gz);
        const double sq = dot(gz, gz);
        for (std::uint32_t i = 0; i < p; ++i)
            CHECK(out[i] == doctest::Approx(gz[i] * sq).epsilon(1e-12));
    }
    SUBCASE("applying to basis vectors reproduces the explicit matrix") {
        const Mat rows = per_sample_grads(model, theta, data, ids);
        // Explicit (1/b) sum g g^T.
        Mat h(p, p);
        for (std::size_t r = 0; r < rows.rows; ++r)
            rank_one_update(h, 1.0 / 4.0, rows.row_span(r), rows.row_span(r));
        for (std::uint32_t j = 0; j < p; ++j) {
            Vec e(p, 0.0);
            e[j] = 1.0;
            const Vec out = ggn_vec(model, theta, data, ids, e);
            for (std::uint32_t i = 0; i < p; ++i)
                CHECK(std::abs(out[i] - h.at(i, j)) <= 1e-12);
        }
    }
    SUBCASE("linearity to 1e-12") {
        RngCursor rng(RngStream{77, 0});
        Vec u(p, 0.0), v(p, 0.0);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        const double alpha = 0.7, beta = -1.3;
        Vec uv(p, 0.0);
        for (std::uint32_t i = 0; i < p; ++i)
            uv[i] = alpha * u[i] + beta * v[i];
        const Vec lhs = ggn_vec(model, theta, data, ids, uv);
        const Vec a = ggn_vec(model, theta, data, ids, u);
        const Vec b = ggn_vec(model, theta, data, ids, v);
        for (std::uint32_t i = 0; i < p; ++i)
            CHECK(std::abs(lhs[i] - (alpha * a[i] + beta * b[i])) <= 1e-12);
    }
}

TEST_CASE("hvp_fd: identity Hessian on the quadratic toy") {
    const testsup::QuadraticModel quad(3);
    Dataset anchors;
    anchors.n = 2;
    anchors.d = 3;
    anchors.num_classes = 1;
    anchors.features = {0.3, -0.2, 0.9, -1.0, 0.4, 0.0};
    anchors.labels = {0, 0};
    const Vec theta{0.1, 0.2, -0.3};
    const Vec v{1.0, -2.0, 0.5};
    const std::vector<std::uint32_t> ids{0, 1};
    const Vec out = hvp_fd(quad, theta, anchors, ids, v, 1e-4);
    for (std::uint32_t i = 0; i < 3; ++i)
        CHECK(out[i] == doctest::Approx(v[i]).epsilon(1e-8));

    const Vec zero = hvp_fd(quad, theta, anchors, ids, Vec(3, 0.0), 1e-4);
    for (double x : zero) CHECK(x == 0.0);
}

TEST_CASE("hvp_fd is symmetric on an MLP") {
    const Dataset data = tiny_data(8, 3, 3, 41);
    const Model model = mlp_model(3, 5, 3, 41);
    const std::uint32_t p = model.param_dim();
    Vec theta = model.init_params();
    RngCursor rng(RngStream{55, 0});
    Vec v1(p, 0.0), v2(p, 0.0);
    for (auto& x : v1) x = rng.normal();
    for (auto& x : v2) x = rng.normal();
    const std::vector<std::uint32_t> ids{0, 1, 2, 3, 4, 5};
    const Vec hv1 = hvp_fd(model, theta, data, ids, v1, 1e-5);
    const Vec hv2 = hvp_fd(model, theta, data, ids, v2, 1e-5);
    CHECK(std::abs(dot(v2, hv1) - dot(v1, hv2)) < 1e-6);
}

TEST_CASE("parameter flattening covers layers then biases") {
    const Model model = mlp_model(3, 4, 2);
    CHECK(model.param_dim() == 3 * 4 + 4 + 4 * 2 + 2);
    const ModelSpec parsed = ModelSpec::parse(model.spec().to_string());
    CHECK(parsed.layer_dims == model.spec().layer_dims);
    CHECK(parsed.init_seed == model.spec().init_seed);
    CHECK(parsed.kind == model.spec().kind);
}

TEST_CASE("init is deterministic in the seed and within bounds") {
    const Model a = mlp_model(4, 6, 3, 99);
    const Model b = mlp_model(4, 6, 3, 99);
    const Model c = mlp_model(4, 6, 3, 100);
    CHECK(a.init_params() == b.init_params());
    CHECK(a.init_params() != c.init_params());
    const Vec theta = a.init_params();
    for (double x : theta) CHECK(std::abs(x) <= 0.5);  // 1/sqrt(4)
}

TEST_SUITE_END();
