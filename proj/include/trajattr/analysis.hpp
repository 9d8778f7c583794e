// SPDX-License-Identifier: Apache-2.0
//
// Fidelity statistics, the three-way error decomposition, factor sweeps, and
// the closed-form error proxy. All analyses are pure folds over immutable
// inputs; CSV emission lives in the CLI.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trajattr/attribution.hpp"
#include "trajattr/core_math.hpp"
#include "trajattr/trajectory.hpp"

namespace trajattr {

// (sample, injection step) key shared by estimator and oracle outputs.
struct RecordKey {
    std::uint32_t sample_id = 0;
    std::uint32_t t_star = 0;

    friend bool operator==(const RecordKey&, const RecordKey&) = default;
    friend auto operator<=>(const RecordKey&, const RecordKey&) = default;
};

struct FidelityReport {
    std::string estimator_tag;
    Vec rho_per_val;  // Spearman across samples, one entry per val point
    double rho_mean = 0.0;
    double rho_std = 0.0;
    std::size_t num_samples = 0;
};

// Per-validation-point Spearman between estimator scores and TSLOO loss
// deltas over the matched (sample, t_star) set, then mean and std over
// validation points. Oracle keys missing from the estimator are an error.
FidelityReport fidelity(const std::vector<RecordKey>& est_keys,
                        const Mat& est_scores,
                        const std::vector<RecordKey>& oracle_keys,
                        const Mat& oracle_deltas,
                        const std::string& estimator_tag);

struct DecompositionBin {
    std::uint32_t bin_start = 0;  // [bin_start, bin_end)
    std::uint32_t bin_end = 0;
    double green_mean = 0.0;  // optimizer mismatch share
    double blue_mean = 0.0;   // update-estimation error
    double grey_mean = 0.0;   // residual (by subtraction; may be negative)
    double error_sgd_mean = 0.0;
    std::uint32_t count = 0;
};

// Inputs are aligned per record: TSLOO aggregate loss delta, both estimators'
// aggregate scores, the true masked parameter change, the AdamW estimate, and
// the aggregate validation gradient (masked). Additivity
// green + blue + grey == |Error_SGD| holds exactly per record by
// construction of grey.
std::vector<DecompositionBin> error_decomposition(
    const std::vector<RecordKey>& keys, std::span<const double> tsloo_agg,
    std::span<const double> sgd_scores, std::span<const double> adamw_scores,
    const std::vector<Vec>& delta_theta_true,
    const std::vector<Vec>& delta_theta_adamw,
    std::span<const double> val_grad_agg, std::uint32_t bin_width = 5);

struct SweepPoint {
    std::uint32_t t = 0;
    double error_norm_mean = 0.0;
    double intra_rho = 0.0;
    bool rho_defined = false;
};

struct SweepCurve {
    std::vector<SweepPoint> points;
    Vec rho_smoothed;  // rolling mean over the defined-rho curve
};

// Per training step: mean ||delta_theta_true - delta_theta_est||_2 over the
// step's batch and the intra-step Spearman between estimator scores and
// TSLOO aggregate deltas. Steps with fewer than 2 usable samples are marked
// undefined and skipped by the smoother.
SweepCurve factor_sweep(const std::vector<RecordKey>& keys,
                        std::span<const double> tsloo_agg,
                        std::span<const double> est_scores,
                        const std::vector<Vec>& delta_theta_true,
                        const std::vector<Vec>& delta_theta_est,
                        std::uint32_t num_steps,
                        std::uint32_t smooth_window = 5);

struct ProxyRecord {
    std::uint32_t sample_id = 0;
    std::uint32_t t_star = 0;
    double proxy = 0.0;       // nonnegative
    double error_norm = 0.0;  // ||delta_theta_true - delta_theta_est||_2
};

// Closed-form per-sample error proxy accumulated along the trajectory:
//   r_i = sum_t eta_t ( ||theta_dot_t||^2 / sqrt(v_hat_{t,i})
//                      + [H_t theta_dot_t]_i^2 / v_hat_{t,i} )
// over t in [t_star+1, T-1], with H_t theta_dot_t from the cached per-sample
// gradients and v_hat floored as in the attribution kernels. Returns ||r||_2,
// or sum_t ||r_t||_2 when per_step_norms is set.
double error_proxy_for_sample(const StepSource& steps, const OptimConfig& cfg,
                              std::uint32_t t_star,
                              std::span<const PushState> path,
                              bool per_step_norms = false);

struct ProxyFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    double rho = 0.0;
    std::size_t used = 0;
    std::size_t dropped = 0;  // nonpositive proxy or error values
};

// Least-squares line of log(error) on log(proxy) plus the Spearman rank
// correlation; needs at least 3 usable points.
ProxyFit proxy_fit(std::span<const ProxyRecord> records);

// Mean and sample standard deviation.
std::pair<double, double> mean_std(std::span<const double> xs);

}  // namespace trajattr
