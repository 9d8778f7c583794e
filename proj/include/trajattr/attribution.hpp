// SPDX-License-Identifier: Apache-2.0
//
// Trajectory-based per-sample influence estimators.
//
// Both estimators target the same counterfactual: the change in the final
// parameters if one sample's contribution were removed from its batch at its
// injection step (the batch mean keeps divisor b, so the removed direction is
// g_z / b). The SGD estimator unrolls plain SGD dynamics; the AdamW estimator
// propagates the gradient-level perturbation through the joint dynamics of
// the parameters and both moment states via a backward recurrence over the
// block summary matrix W = [W_theta | W_m | W_v].
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trajattr/mask.hpp"
#include "trajattr/optim.hpp"
#include "trajattr/trajectory.hpp"

namespace trajattr {

// Diagonal factors of the differentiated AdamW update:
//   d = 1 / (sqrt(v_hat) + eps)
//   s = m_hat / (2 sqrt(v_hat) (sqrt(v_hat) + eps)^2)
// computed from bias-corrected moments with exponent t+1. sqrt(v_hat) is
// floored at eps_floor inside the 1/(2 sqrt(v_hat)) factor, which is
// otherwise unbounded at freshly initialized coordinates.
struct DiagFactors {
    Vec d;
    Vec s;
};

inline constexpr double kVhatFloor = 1e-12;

DiagFactors diag_factors(std::span<const double> m, std::span<const double> v,
                         std::uint32_t t, const OptimConfig& cfg);

// Initial perturbation (theta_dot_{t*+1}, m_dot_{t*}, v_dot_{t*}) created by
// removing a sample at its injection step.
struct PushState {
    Vec theta_dot;
    Vec m_dot;
    Vec v_dot;

    std::uint32_t dim() const {
        return static_cast<std::uint32_t>(theta_dot.size());
    }
    static PushState zeros(std::uint32_t s) {
        return PushState{Vec(s, 0.0), Vec(s, 0.0), Vec(s, 0.0)};
    }
};

// `g_z_mean` must be the per-sample gradient already divided by the batch
// size (mean-reduction convention).
PushState push_state(std::span<const double> g_z_mean,
                     std::span<const double> g_t, std::span<const double> m_t,
                     std::span<const double> v_t, std::uint32_t t, double eta,
                     const OptimConfig& cfg);

// Backward propagator over the augmented state, stored as three |S| x |S|
// column blocks of W in R^{|S| x 3|S|}. Terminal condition W^(T) = [I 0 0].
struct SummaryMatrix {
    Mat theta;
    Mat m;
    Mat v;

    static SummaryMatrix terminal(std::uint32_t s);
    // W * Z over the augmented state.
    Vec apply(const PushState& z) const;
};

// Multiply-accumulate counter for the cost-contract tests.
struct OpCounter {
    std::uint64_t fmadds = 0;
};

struct AttributionRecord {
    std::uint32_t sample_id = 0;
    std::uint32_t t_star = 0;
    // Estimated parameter change (final-parameter perturbation) at eps = 1,
    // restricted to the mask.
    Vec delta_theta;
};

// One backward sweep emitting a record per (sample, occurrence). Steps are
// read exactly once, from T-1 down to 0; records are returned sorted by
// (t_star, position in batch).
std::vector<AttributionRecord> backward_adamw_influence(
    const StepSource& steps, const OptimConfig& cfg,
    OpCounter* ops = nullptr);

// Efficient SGD-influence under the GGN approximation; deliberately runnable
// on AdamW-recorded trajectories to measure optimizer-mismatch error.
std::vector<AttributionRecord> backward_sgd_influence(
    const StepSource& steps, OpCounter* ops = nullptr);

// Forward evolution of one perturbation through steps [t_begin, t_end), as a
// linear dynamical system with the GGN standing in for the Hessian. Returns
// the state at entry to every step plus the final state: result[k] is
// Z_{t_begin + k}, so result.front() == z and result.back() is Z_{t_end}.
std::vector<PushState> forward_propagate(const PushState& z,
                                         const StepSource& steps,
                                         std::uint32_t t_begin,
                                         std::uint32_t t_end,
                                         const OptimConfig& cfg,
                                         OpCounter* ops = nullptr);

// Same transition for the plain SGD unroll: theta_dot <- (I - eta H) theta_dot.
void sgd_forward_step(Vec& theta_dot, const StepRecord& rec,
                      OpCounter* ops = nullptr);

// score = dot(validation gradient restricted to S, delta_theta); this is the
// removal orientation of the leave-one-out target, so positive means removal
// would raise the validation loss (a helpful sample).
double influence_score(const AttributionRecord& rec,
                       std::span<const double> val_grad_masked);

// scores(r, v) = dot(val_grads row v, records[r].delta_theta).
Mat score_records(const std::vector<AttributionRecord>& records,
                  const Mat& val_grads_masked);

enum class Estimator { adamw, sgd };

struct ScoredAttribution {
    std::vector<std::uint32_t> sample_ids;
    std::vector<std::uint32_t> t_stars;
    Mat scores;  // records x validation points
};

// Runs the estimator once per mask on freshly recorded (identical) training
// and averages the per-validation-point scores across members.
ScoredAttribution ensemble_attribute(
    const SampleLossModel& model, const ModelSpec& spec, const Dataset& train,
    const OptimConfig& cfg, const BatchSchedule& schedule, const Vec& theta0,
    std::span<const Mask> masks, const Mat& val_grads_full,
    Estimator estimator);

// Full-dimensional gradients of the validation points at theta, one row each.
Mat validation_gradients(const SampleLossModel& model,
                         std::span<const double> theta, const Dataset& val,
                         std::span<const std::uint32_t> val_ids);

}  // namespace trajattr
