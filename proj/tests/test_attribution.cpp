// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>

#include "test_support.hpp"
#include "trajattr/attribution.hpp"
#include "trajattr/errors.hpp"

using namespace trajattr;
using testsup::make_tiny_run;
using testsup::max_abs_diff;

TEST_SUITE_BEGIN("attribution");

TEST_CASE("build_mask basics") {
    const Mask all = build_mask(10, 1.0, RngStream{3, 0});
    CHECK(all.size() == 10);
    CHECK(all.is_identity());

    const Mask a = build_mask(10, 0.5, RngStream{3, 0});
    const Mask b = build_mask(10, 0.5, RngStream{3, 0});
    CHECK(a.indices == b.indices);
    CHECK(a.size() == 5);
    CHECK_THROWS_AS(build_mask(10, 0.0, RngStream{0, 0}),
                    invalid_input_error);
    CHECK_THROWS_AS(build_mask(10, 1.5, RngStream{0, 0}),
                    invalid_input_error);
}

TEST_CASE("mask inclusion frequency stays inside the binomial band") {
    const std::uint32_t p = 1000;
    const int trials = 800;
    std::vector<int> hits(p, 0);
    for (int k = 0; k < trials; ++k) {
        const Mask m = build_mask(p, 0.1, RngStream{900, (std::uint64_t)k});
        for (auto i : m.indices) ++hits[i];
    }
    const double sigma = std::sqrt(0.1 * 0.9 / trials);
    int outliers = 0;
    for (std::uint32_t i = 0; i < p; ++i) {
        const double freq = static_cast<double>(hits[i]) / trials;
        if (std::abs(freq - 0.1) > 3.0 * sigma) ++outliers;
    }
    // 3-sigma band: expect a fraction ~0.3% outside; allow some slack.
    CHECK(outliers <= 15);
}

TEST_CASE("diag_factors trivial values") {
    OptimConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 0.0;

    SUBCASE("zero first moment zeroes S") {
        // v chosen so v_hat = 1 at t = 0: v = (1 - beta2).
        const Vec m(3, 0.0);
        const Vec v(3, 1.0 - cfg.beta2);
        const DiagFactors df = diag_factors(m, v, 0, cfg);
        for (double s : df.s) CHECK(s == 0.0);
        for (double d : df.d) CHECK(d == doctest::Approx(1.0));
    }
    SUBCASE("unit second moment gives D = 1, S = m_hat / 2") {
        const Vec m{0.4 * (1.0 - cfg.beta1)};
        const Vec v{1.0 - cfg.beta2};
        const DiagFactors df = diag_factors(m, v, 0, cfg);
        CHECK(df.d[0] == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(df.s[0] == doctest::Approx(0.2).epsilon(1e-13));
    }
}

TEST_CASE("diag_factors matches a long-double re-derivation") {
    OptimConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 1e-8;
    RngCursor rng(RngStream{71, 0});
    for (int rep = 0; rep < 20; ++rep) {
        const std::uint32_t t = rep * 3;
        Vec m(5, 0.0), v(5, 0.0);
        for (auto& x : m) x = rng.normal();
        for (auto& x : v) x = std::abs(rng.normal()) + 1e-6;
        const DiagFactors df = diag_factors(m, v, t, cfg);
        const long double bc1 = 1.0L - std::pow((long double)cfg.beta1, t + 1);
        const long double bc2 = 1.0L - std::pow((long double)cfg.beta2, t + 1);
        for (int i = 0; i < 5; ++i) {
            const long double v_hat = (long double)v[i] / bc2;
            const long double m_hat = (long double)m[i] / bc1;
            const long double root = std::sqrt(v_hat);
            const long double d = 1.0L / (root + cfg.eps);
            const long double s =
                m_hat / (2.0L * root * (root + cfg.eps) * (root + cfg.eps));
            CHECK(df.d[i] == doctest::Approx((double)d).epsilon(1e-12));
            CHECK(df.s[i] == doctest::Approx((double)s).epsilon(1e-12));
        }
    }
}

TEST_CASE("push_state: zero per-sample gradient gives a zero push") {
    OptimConfig cfg;
    const Vec zeros(4, 0.0);
    Vec g(4, 0.3), m(4, 0.1), v(4, 0.2);
    const PushState z = push_state(zeros, g, m, v, 2, 1e-2, cfg);
    for (double x : z.theta_dot) CHECK(x == 0.0);
    for (double x : z.m_dot) CHECK(x == 0.0);
    for (double x : z.v_dot) CHECK(x == 0.0);
}

TEST_CASE("push_state reduces to the SGD injection in plain mode") {
    OptimConfig cfg;
    cfg.beta1 = 0.0;
    cfg.beta2 = 0.0;
    cfg.plain_sgd_mode = true;
    const double eta = 0.05;
    Vec gz{0.2, -0.4};  // already divided by b
    Vec g{1.0, 2.0}, m{0.0, 0.0}, v{0.0, 0.0};
    const PushState z = push_state(gz, g, m, v, 0, eta, cfg);
    CHECK(z.theta_dot[0] == doctest::Approx(eta * 0.2).epsilon(1e-15));
    CHECK(z.theta_dot[1] == doctest::Approx(eta * -0.4).epsilon(1e-15));
}

TEST_CASE("push_state matches a single-step finite difference") {
    // theta_dot must equal d/d(eps) of one AdamW step with
    // g(eps) = g - eps * g_z at eps = 0 (g_z here already mean-reduced).
    OptimConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.schedule.base_lr = 3e-2;
    RngCursor rng(RngStream{83, 0});
    for (int rep = 0; rep < 10; ++rep) {
        const std::uint32_t t = rep;  // step index under test
        const std::uint32_t p = 6;
        Vec theta(p), g(p), gz(p), m_prev(p), v_prev(p);
        for (auto& x : theta) x = rng.normal();
        for (auto& x : g) x = rng.normal();
        for (auto& x : gz) x = 0.25 * rng.normal();
        for (auto& x : m_prev) x = 0.3 * rng.normal();
        for (auto& x : v_prev) x = std::abs(rng.normal()) * 0.2 + 1e-4;

        auto step_with = [&](double eps) {
            Vec th = theta;
            OptimState st{m_prev, v_prev, t};
            Vec ge(p, 0.0);
            for (std::uint32_t i = 0; i < p; ++i) ge[i] = g[i] - eps * gz[i];
            OptimConfig c = cfg;
            adamw_step(th, ge, st, c);
            return std::pair{th, st};
        };

        // Post-update moments of the unperturbed step feed the push.
        const auto [theta_next, st_next] = step_with(0.0);
        (void)theta_next;
        const PushState z =
            push_state(gz, g, st_next.m, st_next.v, t, cfg.schedule.base_lr,
                       cfg);

        const double eps = 1e-4;
        const auto [plus, sp] = step_with(eps);
        const auto [minus, sm] = step_with(-eps);
        for (std::uint32_t i = 0; i < p; ++i) {
            const double fd_theta = (plus[i] - minus[i]) / (2 * eps);
            const double fd_m = (sp.m[i] - sm.m[i]) / (2 * eps);
            const double fd_v = (sp.v[i] - sm.v[i]) / (2 * eps);
            CHECK(std::abs(z.theta_dot[i] - fd_theta) <=
                  1e-5 * std::max(1e-6, std::abs(fd_theta)));
            CHECK(z.m_dot[i] == doctest::Approx(fd_m).epsilon(1e-7));
            CHECK(std::abs(z.v_dot[i] - fd_v) <=
                  1e-6 * std::max(1e-9, std::abs(fd_v)));
        }
    }
}

TEST_CASE("terminal condition: last-batch influence equals its push") {
    const testsup::TinyRun run = make_tiny_run(301);
    const auto records = backward_adamw_influence(*run.rec.steps, run.optim);
    const std::uint32_t T = run.schedule.num_steps();
    const StepRecord last = run.rec.steps->get(T - 1);
    for (std::uint32_t j = 0; j < last.batch_size(); ++j) {
        Vec gz(last.g.size(), 0.0);
        for (std::size_t i = 0; i < gz.size(); ++i)
            gz[i] = last.per_sample_grads.at(j, i) /
                    static_cast<double>(last.batch_size());
        const PushState z = push_state(gz, last.g, last.m, last.v, T - 1,
                                       last.eta, run.optim);
        // Records are sorted by (t_star, batch position).
        const auto& rec = records[(T - 1) * last.batch_size() + j];
        CHECK(rec.t_star == T - 1);
        CHECK(rec.sample_id == last.sample_ids[j]);
        CHECK(max_abs_diff(rec.delta_theta, z.theta_dot) == 0.0);
    }
}

TEST_CASE("explicit dense product reproduces the backward recurrence") {
    // Tiny instances, every flavor: AdamW, weight decay, plain mode with and
    // without momentum, SGD-style beta2 = 0.
    int instances = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        struct Cfg {
            double b1, b2, wd;
            bool plain;
        };
        for (const Cfg& c : {Cfg{0.9, 0.95, 0.0, false},
                             Cfg{0.9, 0.95, 0.01, false},
                             Cfg{0.0, 0.0, 0.0, true},
                             Cfg{0.5, 0.0, 0.0, true}}) {
            const testsup::TinyRun run =
                make_tiny_run(1000 + seed, 8, 2, 2, 2, 1, 5e-2, c.b1, c.b2,
                              c.wd, c.plain, /*mlp=*/false);
            REQUIRE(run.model->param_dim() <= 6);
            const auto records =
                backward_adamw_influence(*run.rec.steps, run.optim);
            for (const auto& rec : records) {
                const StepRecord step = run.rec.steps->get(rec.t_star);
                const std::size_t pos =
                    std::find(step.sample_ids.begin(), step.sample_ids.end(),
                              rec.sample_id) -
                    step.sample_ids.begin();
                const auto expected = testsup::explicit_influence(
                    *run.rec.steps, run.optim, rec.t_star, pos);
                CHECK(max_abs_diff(rec.delta_theta, expected) <= 1e-10);
            }
            ++instances;
        }
    }
    CHECK(instances == 20);
}

TEST_CASE("plain-sgd mode equals backward_sgd_influence on one trajectory") {
    const testsup::TinyRun run =
        make_tiny_run(302, 24, 4, 3, 4, 2, 5e-2, 0.0, 0.0, 0.0, /*plain=*/true,
                      true, 1.0, OptimAlgo::adamw);
    const auto adamw_records =
        backward_adamw_influence(*run.rec.steps, run.optim);
    const auto sgd_records = backward_sgd_influence(*run.rec.steps);
    REQUIRE(adamw_records.size() == sgd_records.size());
    for (std::size_t k = 0; k < adamw_records.size(); ++k) {
        CHECK(adamw_records[k].sample_id == sgd_records[k].sample_id);
        CHECK(adamw_records[k].t_star == sgd_records[k].t_star);
        CHECK(max_abs_diff(adamw_records[k].delta_theta,
                           sgd_records[k].delta_theta) <= 1e-10);
    }
}

TEST_CASE("sgd influence: last step emits (eta/b) g_z") {
    const testsup::TinyRun run = make_tiny_run(303);
    const auto records = backward_sgd_influence(*run.rec.steps);
    const std::uint32_t T = run.schedule.num_steps();
    const StepRecord last = run.rec.steps->get(T - 1);
    const double scale = last.eta / last.batch_size();
    for (std::uint32_t j = 0; j < last.batch_size(); ++j) {
        const auto& rec = records[(T - 1) * last.batch_size() + j];
        for (std::size_t i = 0; i < rec.delta_theta.size(); ++i)
            CHECK(rec.delta_theta[i] ==
                  doctest::Approx(scale * last.per_sample_grads.at(j, i))
                      .epsilon(1e-15));
    }
}

TEST_CASE("sgd influence on T=2 equals the explicit GGN matrix") {
    const testsup::TinyRun run =
        make_tiny_run(304, 4, 1, 2, 2, 1, 7e-2, 0.0, 0.0, 0.0, true,
                      /*mlp=*/false);
    const std::uint32_t p = run.model->param_dim();
    REQUIRE(p <= 4);
    REQUIRE(run.schedule.num_steps() == 2);
    const auto records = backward_sgd_influence(*run.rec.steps);
    const StepRecord s0 = run.rec.steps->get(0);
    const StepRecord s1 = run.rec.steps->get(1);

    // Explicit (I - eta_1 H_1).
    Mat prop = Mat::identity(p);
    for (std::size_t z = 0; z < s1.batch_size(); ++z)
        rank_one_update(prop, -s1.eta / s1.batch_size(), s1.per_sample_grads.row_span(z),
                        s1.per_sample_grads.row_span(z));

    for (std::uint32_t j = 0; j < s0.batch_size(); ++j) {
        Vec expected(p, 0.0);
        matvec(prop, s0.per_sample_grads.row_span(j), expected);
        scale(expected, s0.eta / s0.batch_size());
        CHECK(max_abs_diff(records[j].delta_theta, expected) <= 1e-12);
    }
}

TEST_CASE("all-zero gradients yield all-zero influences") {
    // Quadratic model with every anchor equal to theta0: all gradients are 0.
    const std::uint32_t p = 3;
    testsup::QuadraticModel quad(p);
    Dataset anchors;
    anchors.n = 4;
    anchors.d = p;
    anchors.num_classes = 1;
    const Vec theta0{0.25, -0.5, 1.0};
    for (int i = 0; i < 4; ++i)
        anchors.features.insert(anchors.features.end(), theta0.begin(),
                                theta0.end());
    anchors.labels.assign(4, 0);
    OptimConfig cfg;
    cfg.schedule.base_lr = 0.1;
    ModelSpec spec;
    spec.kind = ModelKind::logistic;
    spec.layer_dims = {p, 1};
    const BatchSchedule sched = make_schedule(4, 2, 1, RngStream{0, 0});
    const Mask mask = build_mask(p, 1.0, RngStream{0, 1});
    const RecordResult rec =
        record_training(quad, spec, anchors, cfg, sched, mask, theta0);
    for (const auto& out : backward_adamw_influence(*rec.steps, cfg))
        for (double x : out.delta_theta) CHECK(x == 0.0);
    for (const auto& out : backward_sgd_influence(*rec.steps))
        for (double x : out.delta_theta) CHECK(x == 0.0);
}

TEST_CASE("forward propagation: zero state stays zero") {
    const testsup::TinyRun run = make_tiny_run(305);
    const auto path = forward_propagate(
        PushState::zeros(run.mask.size()), *run.rec.steps, 0,
        run.schedule.num_steps(), run.optim);
    for (const auto& z : path) {
        for (double x : z.theta_dot) CHECK(x == 0.0);
        for (double x : z.m_dot) CHECK(x == 0.0);
        for (double x : z.v_dot) CHECK(x == 0.0);
    }
}

TEST_CASE("one plain-mode step applies (I - eta H)") {
    const testsup::TinyRun run =
        make_tiny_run(306, 8, 2, 2, 2, 1, 5e-2, 0.0, 0.0, 0.0, true,
                      /*mlp=*/false);
    const std::uint32_t p = run.model->param_dim();
    RngCursor rng(RngStream{61, 0});
    PushState z = PushState::zeros(p);
    for (auto& x : z.theta_dot) x = rng.normal();
    const auto path =
        forward_propagate(z, *run.rec.steps, 0, 1, run.optim);
    const StepRecord s0 = run.rec.steps->get(0);
    Vec hv(p, 0.0);
    ggn_vec_from_rows(s0.per_sample_grads, z.theta_dot, hv);
    for (std::uint32_t i = 0; i < p; ++i)
        CHECK(path[1].theta_dot[i] ==
              doctest::Approx(z.theta_dot[i] - s0.eta * hv[i])
                  .epsilon(1e-14));
}

TEST_CASE("backward result equals forward propagation of the push") {
    for (std::uint64_t seed : {401ull, 402ull}) {
        const testsup::TinyRun run =
            make_tiny_run(seed, 24, 4, 3, 4, 2, 5e-2, 0.9, 0.95, 0.01);
        const auto records =
            backward_adamw_influence(*run.rec.steps, run.optim);
        const std::uint32_t T = run.schedule.num_steps();
        for (std::size_t k = 0; k < records.size(); k += 7) {
            const auto& rec = records[k];
            const StepRecord step = run.rec.steps->get(rec.t_star);
            const std::size_t pos =
                std::find(step.sample_ids.begin(), step.sample_ids.end(),
                          rec.sample_id) -
                step.sample_ids.begin();
            Vec gz(step.g.size(), 0.0);
            for (std::size_t i = 0; i < gz.size(); ++i)
                gz[i] = step.per_sample_grads.at(pos, i) /
                        static_cast<double>(step.batch_size());
            const PushState z = push_state(gz, step.g, step.m, step.v,
                                           rec.t_star, step.eta, run.optim);
            const auto path = forward_propagate(z, *run.rec.steps,
                                                rec.t_star + 1, T, run.optim);
            CHECK(max_abs_diff(rec.delta_theta, path.back().theta_dot) <=
                  1e-10);
        }
    }
}

TEST_CASE("influence is exactly linear in the injected gradient") {
    const testsup::TinyRun run = make_tiny_run(403);
    const StepRecord step = run.rec.steps->get(1);
    Vec gz(step.g.size(), 0.0), gz2(step.g.size(), 0.0);
    for (std::size_t i = 0; i < gz.size(); ++i) {
        gz[i] = step.per_sample_grads.at(0, i) / step.batch_size();
        gz2[i] = 2.0 * gz[i];
    }
    const PushState z1 = push_state(gz, step.g, step.m, step.v, 1, step.eta,
                                    run.optim);
    const PushState z2 = push_state(gz2, step.g, step.m, step.v, 1, step.eta,
                                    run.optim);
    SummaryMatrix w = SummaryMatrix::terminal(run.mask.size());
    const Vec a = w.apply(z1);
    const Vec b = w.apply(z2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == 2.0 * a[i]);

    // Through the full forward dynamics as well: doubling is exact.
    const auto pa = forward_propagate(z1, *run.rec.steps, 2,
                                      run.schedule.num_steps(), run.optim);
    const auto pb = forward_propagate(z2, *run.rec.steps, 2,
                                      run.schedule.num_steps(), run.optim);
    for (std::size_t i = 0; i < pa.back().theta_dot.size(); ++i)
        CHECK(pb.back().theta_dot[i] == 2.0 * pa.back().theta_dot[i]);
}

TEST_CASE("cost contract: one read per step, fmadds near the 3Tbs^2 model") {
    const testsup::TinyRun run = make_tiny_run(404, 32, 4, 2, 8, 1, 1e-2);
    OpCounter ops;
    backward_adamw_influence(*run.rec.steps, run.optim, &ops);
    const std::uint64_t T = run.schedule.num_steps();
    CHECK(run.rec.steps->reads() == T);

    const std::uint64_t s = run.mask.size();
    const std::uint64_t b = 8;
    const std::uint64_t model = 3 * T * b * s * s;
    CHECK(ops.fmadds >= model / 4);
    CHECK(ops.fmadds <= model * 4);
}

TEST_CASE("scoring identity and score_records") {
    const testsup::TinyRun run = make_tiny_run(405);
    const auto records = backward_adamw_influence(*run.rec.steps, run.optim);
    const Mat val_full = validation_gradients(
        *run.model, run.rec.thetaT, run.val,
        std::vector<std::uint32_t>{0, 1, 2});
    Mat val_masked(val_full.rows, run.mask.size());
    for (std::size_t v = 0; v < val_full.rows; ++v)
        run.mask.restrict(val_full.row_span(v),
                          {val_masked.row(v), val_masked.cols});
    const Mat scores = score_records(records, val_masked);
    for (std::size_t r = 0; r < records.size(); r += 11)
        for (std::size_t v = 0; v < 3; ++v)
            CHECK(scores.at(r, v) ==
                  dot(records[r].delta_theta, val_masked.row_span(v)));
}

TEST_CASE("ensemble: single identity mask equals unmasked attribution") {
    const testsup::TinyRun run = make_tiny_run(406);
    const Mat val_full = validation_gradients(
        *run.model, run.rec.thetaT, run.val,
        std::vector<std::uint32_t>{0, 1});
    const std::vector<Mask> masks{run.mask};  // keep_ratio 1
    const ScoredAttribution ens = ensemble_attribute(
        *run.model, run.spec, run.train, run.optim, run.schedule,
        run.rec.theta0, masks, val_full, Estimator::adamw);

    const auto records = backward_adamw_influence(*run.rec.steps, run.optim);
    const Mat direct = score_records(records, val_full);
    REQUIRE(ens.scores.data.size() == direct.data.size());
    for (std::size_t i = 0; i < direct.data.size(); ++i)
        CHECK(ens.scores.data[i] == direct.data[i]);
}

TEST_CASE("ensemble of two identical masks equals the single-mask run") {
    const testsup::TinyRun run = make_tiny_run(407);
    const Mask half = build_mask(run.model->param_dim(), 0.5,
                                 RngStream{407, 99});
    const Mat val_full = validation_gradients(
        *run.model, run.rec.thetaT, run.val,
        std::vector<std::uint32_t>{0, 1});
    const std::vector<Mask> one{half};
    const std::vector<Mask> two{half, half};
    const ScoredAttribution a = ensemble_attribute(
        *run.model, run.spec, run.train, run.optim, run.schedule,
        run.rec.theta0, one, val_full, Estimator::adamw);
    const ScoredAttribution b = ensemble_attribute(
        *run.model, run.spec, run.train, run.optim, run.schedule,
        run.rec.theta0, two, val_full, Estimator::adamw);
    for (std::size_t i = 0; i < a.scores.data.size(); ++i)
        CHECK(a.scores.data[i] == doctest::Approx(b.scores.data[i]));
    CHECK_THROWS_AS(
        ensemble_attribute(*run.model, run.spec, run.train, run.optim,
                           run.schedule, run.rec.theta0, {}, val_full,
                           Estimator::adamw),
        invalid_input_error);
}

TEST_CASE("mask ensembles stabilize rankings") {
    // Spearman between two disjoint half-ensembles (M=4 vs M=4) must beat
    // Spearman between two single-mask runs, on one fixed desk-scale run.
    const testsup::TinyRun run = make_tiny_run(408, 48, 6, 3, 8, 1, 3e-2);
    const Mat val_full = validation_gradients(
        *run.model, run.rec.thetaT, run.val,
        std::vector<std::uint32_t>{0, 1, 2, 3});

    auto masks_from = [&](std::uint64_t base, std::uint32_t count) {
        std::vector<Mask> masks;
        for (std::uint32_t k = 0; k < count; ++k)
            masks.push_back(build_mask(run.model->param_dim(), 0.25,
                                       RngStream{base, k}));
        return masks;
    };
    auto mean_scores = [&](const std::vector<Mask>& masks) {
        const ScoredAttribution sa = ensemble_attribute(
            *run.model, run.spec, run.train, run.optim, run.schedule,
            run.rec.theta0, masks, val_full, Estimator::adamw);
        Vec agg(sa.scores.rows, 0.0);
        for (std::size_t r = 0; r < sa.scores.rows; ++r) {
            double acc = 0.0;
            for (std::size_t v = 0; v < sa.scores.cols; ++v)
                acc += sa.scores.at(r, v);
            agg[r] = acc / static_cast<double>(sa.scores.cols);
        }
        return agg;
    };

    const Vec single_a = mean_scores(masks_from(500, 1));
    const Vec single_b = mean_scores(masks_from(600, 1));
    const Vec ens_a = mean_scores(masks_from(500, 4));
    const Vec ens_b = mean_scores(masks_from(600, 4));
    const double rho_single = spearman_rho(single_a, single_b);
    const double rho_ens = spearman_rho(ens_a, ens_b);
    CHECK(rho_ens > rho_single);
}

TEST_SUITE_END();
