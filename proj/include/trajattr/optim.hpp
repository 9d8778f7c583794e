// SPDX-License-Identifier: Apache-2.0
//
// SGD and AdamW steppers with fully exposed state so the trajectory recorder
// can cache exactly what the backward recurrences consume.
#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "trajattr/core_math.hpp"

namespace trajattr {

enum class LrKind { constant, linear_warmup_then_linear_decay };

struct LrSchedule {
    LrKind kind = LrKind::constant;
    double base_lr = 1e-3;
    std::uint32_t warmup_steps = 0;
    std::uint32_t total_steps = 0;

    double lr_at(std::uint32_t t) const;
};

enum class OptimAlgo { adamw, sgd };

// AdamW hyperparameters plus the training-loop knobs. `plain_sgd_mode`
// forces the update denominator to 1 and disables bias correction, so that
// with beta1 = beta2 = 0 and lambda = 0 the stepper reproduces plain SGD
// bit-for-bit; it exists for the reduction tests and the mismatched-optimizer
// estimator.
struct OptimConfig {
    OptimAlgo algo = OptimAlgo::adamw;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool plain_sgd_mode = false;
    LrSchedule schedule;

    std::string to_string() const;
    static OptimConfig parse(const std::string& text);
};

struct OptimState {
    Vec m;
    Vec v;  // elementwise nonnegative
    std::uint32_t step_count = 0;

    static OptimState zeros(std::uint32_t p) {
        return OptimState{Vec(p, 0.0), Vec(p, 0.0), 0};
    }
};

// Moment update shared by the stepper and the shadow accumulators kept
// during SGD training: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2.
void update_moments(std::span<const double> g, OptimState& state,
                    const OptimConfig& cfg);

// One AdamW transition. `state` must hold the pre-step moments; on return it
// holds the post-step moments and step_count is advanced. The bias-correction
// exponent is state.step_count + 1 (t starting at 0). Decoupled weight decay
// multiplies theta by (1 - lr*lambda).
void adamw_step(std::span<double> theta, std::span<const double> g,
                OptimState& state, const OptimConfig& cfg);

// theta <- theta - lr * g
void sgd_step(std::span<double> theta, std::span<const double> g, double lr);

// Bias-correction denominators (1 - beta^(t+1)); both 1 in plain-sgd mode.
struct BiasCorrections {
    double bc1 = 1.0;
    double bc2 = 1.0;
};
BiasCorrections bias_corrections(std::uint32_t t, const OptimConfig& cfg);

}  // namespace trajattr
