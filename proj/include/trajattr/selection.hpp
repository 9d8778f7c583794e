// SPDX-License-Identifier: Apache-2.0
//
// Unified K-step look-ahead data selection: at each step draw N candidates,
// score each by the predicted effect of its inclusion on the validation loss
// K optimizer steps ahead, retain the top B, and step the real optimizer on
// the retained batch. K = 0 is immediate scoring; the offline variant ranks
// by full-trajectory attribution on a completed reference run and retrains.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trajattr/attribution.hpp"
#include "trajattr/datasets.hpp"
#include "trajattr/models.hpp"
#include "trajattr/optim.hpp"

namespace trajattr {

enum class Scorer { adamw, sgd, random_baseline };

struct SelectionConfig {
    std::uint32_t candidate_size = 64;  // N
    std::uint32_t retain_size = 32;     // B <= N
    std::uint32_t horizon = 0;          // K >= 0
    Scorer scorer = Scorer::adamw;
    std::uint32_t probe_size = 16;  // validation probe subset
    std::uint32_t epochs = 1;
    RngStream rng;  // candidate draws, probe pick, random scores
};

struct SelectionStepLog {
    std::uint32_t t = 0;
    std::vector<std::uint32_t> chosen;  // exactly B ids, in draw order
    Vec chosen_scores;
};

struct SelectionTrace {
    std::vector<SelectionStepLog> steps;
    Vec val_metric_per_epoch;  // error rate after each epoch
    double best_val_metric = 0.0;
    std::uint32_t best_epoch = 0;
    double test_metric_at_best = 0.0;
    double final_val_metric = 0.0;
    double final_test_metric = 0.0;
    std::uint64_t replacement_draws = 0;   // candidate pool exhausted
    std::uint64_t excluded_candidates = 0; // nonfinite scores
};

SelectionTrace select_online(const Model& model, const Dataset& train,
                             const Dataset& val, const Dataset& test,
                             const OptimConfig& optim,
                             const SelectionConfig& cfg,
                             OpCounter* ops = nullptr);

// Plain training (no selection) on the same candidate stream with batch size
// B; the N == B boundary of select_online must match it exactly.
SelectionTrace plain_train_eval(const Model& model, const Dataset& train,
                                const Dataset& val, const Dataset& test,
                                const OptimConfig& optim,
                                const SelectionConfig& cfg);

// Single candidate-scoring round against explicit state, exposed for tests
// (sign conventions, K = 0 reduction, equivalence with forward_propagate).
// Returns one score per candidate: the predicted validation-loss increase if
// the candidate were removed, so higher = more helpful.
Vec score_candidates(const Model& model, const Dataset& train,
                     std::span<const std::uint32_t> candidate_ids,
                     std::span<const double> theta, const OptimState& state,
                     const OptimConfig& optim, std::uint32_t t,
                     std::uint32_t horizon,
                     const std::vector<std::vector<std::uint32_t>>&
                         lookahead_batches,
                     std::span<const double> probe_grad, Scorer scorer,
                     OpCounter* ops = nullptr);

// Offline selection: reference run + full-trajectory AdamW-influence scores
// summed per sample across occurrences; the lowest-scoring (most harmful)
// fraction is removed and the model retrains from scratch on the rest.
SelectionTrace select_offline(const Model& model, const Dataset& train,
                              const Dataset& val, const Dataset& test,
                              const OptimConfig& optim,
                              const SelectionConfig& cfg, double keep_ratio);

struct KSweepCell {
    std::uint32_t horizon = 0;
    double lr = 0.0;
    Vec test_metrics;  // one per seed, at the best validation epoch
    double mean = 0.0;
    double stddev = 0.0;
};

struct KSweepResult {
    std::vector<KSweepCell> cells;
    // argmin-K of the seed-mean metric, one entry per learning rate (ties
    // broken toward smaller K), in lr_grid order.
    std::vector<std::uint32_t> argmin_k_per_lr;
    // argmin-K per (lr, seed): [lr index][seed].
    std::vector<std::vector<std::uint32_t>> argmin_k_per_lr_seed;
};

KSweepResult k_sweep(const std::vector<std::uint32_t>& hidden_dims,
                     const Dataset& train, const Dataset& val,
                     const Dataset& test, const OptimConfig& base_optim,
                     const SelectionConfig& base_cfg,
                     std::span<const std::uint32_t> k_grid,
                     std::span<const double> lr_grid, std::uint32_t num_seeds);

}  // namespace trajattr
