// SPDX-License-Identifier: Apache-2.0
#include "trajattr/oracle.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "trajattr/errors.hpp"

namespace trajattr {

std::string removal_mode_name(RemovalMode mode) {
    return mode == RemovalMode::subtract ? "subtract" : "renormalize";
}

namespace {

// Locates z_star in the step's batch; throws if absent.
std::uint32_t batch_position(const std::vector<std::uint32_t>& ids,
                             std::uint32_t z_star, std::uint32_t t_star) {
    const auto it = std::find(ids.begin(), ids.end(), z_star);
    if (it == ids.end())
        throw invalid_input_error("tsloo: sample " + std::to_string(z_star) +
                                  " is not in batch at step " +
                                  std::to_string(t_star));
    return static_cast<std::uint32_t>(it - ids.begin());
}

Vec retrain_with_modified_step(
    const ReplaySetup& setup, std::uint32_t t_star,
    const std::function<void(const Mat& rows, std::uint32_t pos, Vec& g)>&
        substitute,
    std::uint32_t z_star) {
    if (t_star >= setup.schedule.num_steps())
        throw invalid_input_error("tsloo: t_star out of range");
    batch_position(setup.schedule.steps[t_star], z_star, t_star);

    TrainOptions opts;
    opts.modify_grad = [&](std::uint32_t t, const Mat& rows, Vec& g) {
        if (t != t_star) return;
        const std::uint32_t pos =
            batch_position(setup.schedule.steps[t_star], z_star, t_star);
        substitute(rows, pos, g);
    };
    return run_training(*setup.model, *setup.train, setup.optim,
                        setup.schedule, setup.theta0, opts);
}

}  // namespace

TSLOORecord tsloo_retrain(const ReplaySetup& setup, const Mask& mask,
                          std::span<const double> thetaT_base,
                          const SampleLossModel& val_model, const Dataset& val,
                          std::span<const std::uint32_t> val_ids,
                          std::uint32_t z_star, std::uint32_t t_star,
                          RemovalMode mode) {
    auto substitute = [&](const Mat& rows, std::uint32_t pos, Vec& g) {
        if (mode == RemovalMode::subtract) {
            const double inv_b = 1.0 / static_cast<double>(rows.rows);
            const double* gz = rows.row(pos);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= gz[i] * inv_b;
        } else {
            if (rows.rows < 2)
                throw invalid_input_error(
                    "tsloo renormalize: batch of one has no remainder");
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t j = 0; j < rows.rows; ++j) {
                if (j == pos) continue;
                const double* r = rows.row(j);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += r[i];
            }
            const double inv = 1.0 / static_cast<double>(rows.rows - 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= inv;
        }
    };

    TSLOORecord rec;
    rec.sample_id = z_star;
    rec.t_star = t_star;
    rec.mode = mode;
    rec.theta_prime =
        retrain_with_modified_step(setup, t_star, substitute, z_star);
    require_finite(rec.theta_prime, "tsloo_retrain");

    Vec delta_full(rec.theta_prime.size(), 0.0);
    for (std::size_t i = 0; i < delta_full.size(); ++i)
        delta_full[i] = rec.theta_prime[i] - thetaT_base[i];
    rec.delta_theta_masked = mask.restrict(delta_full);

    rec.loss_deltas.resize(val_ids.size());
    for (std::size_t k = 0; k < val_ids.size(); ++k)
        rec.loss_deltas[k] =
            val_model.loss(rec.theta_prime, val, val_ids[k]) -
            val_model.loss(thetaT_base, val, val_ids[k]);
    return rec;
}

Vec retrain_with_scaled_removal(const ReplaySetup& setup, std::uint32_t z_star,
                                std::uint32_t t_star, double eps) {
    auto substitute = [&](const Mat& rows, std::uint32_t pos, Vec& g) {
        const double scale = eps / static_cast<double>(rows.rows);
        const double* gz = rows.row(pos);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * gz[i];
    };
    return retrain_with_modified_step(setup, t_star, substitute, z_star);
}

Vec fd_dot_theta(const ReplaySetup& setup, std::uint32_t z_star,
                 std::uint32_t t_star, double eps) {
    if (eps <= 0.0) throw invalid_input_error("fd_dot_theta: eps must be > 0");
    Vec plus, minus;
    try {
        plus = retrain_with_scaled_removal(setup, z_star, t_star, eps);
        minus = retrain_with_scaled_removal(setup, z_star, t_star, -eps);
    } catch (const numeric_error& e) {
        throw numeric_error(std::string(e.what()) +
                            " (fd_dot_theta: try a smaller eps)");
    }
    Vec out(plus.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (plus[i] - minus[i]) / (2.0 * eps);
    require_finite(out, "fd_dot_theta");
    return out;
}

DeterminismReport determinism_probe(const ReplaySetup& setup) {
    const Vec a = run_training(*setup.model, *setup.train, setup.optim,
                               setup.schedule, setup.theta0);
    const Vec b = run_training(*setup.model, *setup.train, setup.optim,
                               setup.schedule, setup.theta0);
    DeterminismReport report;
    for (std::size_t i = 0; i < a.size(); ++i)
        report.reference_max_diff =
            std::max(report.reference_max_diff, std::abs(a[i] - b[i]));
    if (report.reference_max_diff != 0.0)
        throw numeric_error(
            "determinism_probe: reference path is not bit-reproducible");

    TrainOptions permuted;
    permuted.permuted_reduction = true;
    const Vec c = run_training(*setup.model, *setup.train, setup.optim,
                               setup.schedule, setup.theta0, permuted);
    for (std::size_t i = 0; i < a.size(); ++i)
        report.permuted_max_diff =
            std::max(report.permuted_max_diff, std::abs(a[i] - c[i]));
    return report;
}

std::vector<TSLOORecord> tsloo_batch(
    const ReplaySetup& setup, const Mask& mask,
    std::span<const double> thetaT_base, const SampleLossModel& val_model,
    const Dataset& val, std::span<const std::uint32_t> val_ids,
    std::span<const std::pair<std::uint32_t, std::uint32_t>> jobs,
    RemovalMode mode, unsigned parallelism) {
    std::vector<TSLOORecord> out(jobs.size());
    if (parallelism <= 1) {
        for (std::size_t k = 0; k < jobs.size(); ++k)
            out[k] = tsloo_retrain(setup, mask, thetaT_base, val_model, val,
                                   val_ids, jobs[k].first, jobs[k].second,
                                   mode);
        return out;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= jobs.size()) return;
            out[k] = tsloo_retrain(setup, mask, thetaT_base, val_model, val,
                                   val_ids, jobs[k].first, jobs[k].second,
                                   mode);
        }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < parallelism; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return out;
}

}  // namespace trajattr
