// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth generators: trajectory-specific leave-one-out retraining,
// finite-difference perturbation checks, and the determinism probe used for
// the system-level error floor.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trajattr/attribution.hpp"
#include "trajattr/trajectory.hpp"

namespace trajattr {

enum class RemovalMode { subtract, renormalize };

std::string removal_mode_name(RemovalMode mode);

// Everything needed to replay the recorded run bit-identically: same model,
// data, optimizer config, batches, and initial parameters. Never re-draws
// randomness.
struct ReplaySetup {
    const SampleLossModel* model = nullptr;
    const Dataset* train = nullptr;
    OptimConfig optim;
    BatchSchedule schedule;
    Vec theta0;
};

struct TSLOORecord {
    std::uint32_t sample_id = 0;
    std::uint32_t t_star = 0;
    RemovalMode mode = RemovalMode::subtract;
    Vec theta_prime;         // full-dimensional theta'_T
    Vec delta_theta_masked;  // (theta'_T - theta_T) restricted to the mask
    Vec loss_deltas;         // per validation point, loss(theta') - loss(theta)
};

// Identical training except at step t_star, where the batch gradient is
// replaced per `mode`: "subtract" keeps divisor b (the eps = 1 point of the
// gradient-level perturbation family the estimators linearize);
// "renormalize" takes the mean over the remaining b-1 samples.
TSLOORecord tsloo_retrain(const ReplaySetup& setup, const Mask& mask,
                          std::span<const double> thetaT_base,
                          const SampleLossModel& val_model, const Dataset& val,
                          std::span<const std::uint32_t> val_ids,
                          std::uint32_t z_star, std::uint32_t t_star,
                          RemovalMode mode);

// Final parameters after training with g_{t*} replaced by
// g_{t*} - eps * g_{t*,z*} / b.
Vec retrain_with_scaled_removal(const ReplaySetup& setup, std::uint32_t z_star,
                                std::uint32_t t_star, double eps);

// Central difference (theta_T(+eps) - theta_T(-eps)) / (2 eps): the ground
// truth for the propagated perturbation theta_dot_T (full-dimensional).
Vec fd_dot_theta(const ReplaySetup& setup, std::uint32_t z_star,
                 std::uint32_t t_star, double eps);

struct DeterminismReport {
    double reference_max_diff = 0.0;  // must be exactly 0
    double permuted_max_diff = 0.0;   // reduction-order floor, reported
};

// Trains twice on the single-threaded reference path (diff must be zero; a
// nonzero diff is a determinism bug and throws), then once more with a
// permuted reduction order to measure the floating-point noise floor.
DeterminismReport determinism_probe(const ReplaySetup& setup);

// Parallel fan-out over independent (z_star, t_star) jobs; results land in
// job order regardless of thread schedule.
std::vector<TSLOORecord> tsloo_batch(
    const ReplaySetup& setup, const Mask& mask,
    std::span<const double> thetaT_base, const SampleLossModel& val_model,
    const Dataset& val, std::span<const std::uint32_t> val_ids,
    std::span<const std::pair<std::uint32_t, std::uint32_t>> jobs,
    RemovalMode mode, unsigned parallelism = 1);

}  // namespace trajattr
