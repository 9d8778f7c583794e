// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a strict JSON document (unknown keys rejected)
// resolved against defaults. All randomness flows from the single global
// seed through named streams, so any subcommand is re-runnable in isolation.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trajattr/core_math.hpp"
#include "trajattr/datasets.hpp"
#include "trajattr/models.hpp"
#include "trajattr/optim.hpp"
#include "trajattr/oracle.hpp"
#include "trajattr/selection.hpp"

namespace trajattr {

struct DatasetConfig {
    std::string kind = "blobs";  // blobs | idx | file
    // blobs
    std::uint32_t n_train = 1984;
    std::uint32_t n_val = 256;
    std::uint32_t n_test = 512;
    std::uint32_t d = 16;
    std::uint32_t classes = 4;
    double spread = 0.9;
    double label_noise = 0.0;
    // idx
    std::string images, labels, test_images, test_labels;
    double subset_fraction = 0.1;
    std::string subset_mode = "head";  // head | random
    // file (outputs of gen-data)
    std::string train_path, val_path, test_path;
};

struct ModelConfig {
    std::string kind = "mlp";  // mlp | logistic
    std::vector<std::uint32_t> hidden = {16, 16};
};

struct OptimizerConfig {
    std::string algo = "adamw";  // adamw | sgd
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool plain_sgd_mode = false;
    std::string schedule = "constant";  // constant | warmup_linear
    std::uint32_t warmup_steps = 0;
};

struct ScheduleConfig {
    std::uint32_t batch_size = 64;
    std::uint32_t epochs = 1;
};

struct MaskConfig {
    double keep_ratio = 1.0;
    std::uint32_t ensemble = 1;
};

struct AttributionConfig {
    std::string estimator = "adamw";  // adamw | sgd | ensemble
};

struct OracleConfig {
    std::uint32_t num_samples = 100;
    std::uint32_t num_val = 100;
    std::string removal_mode = "subtract";  // subtract | renormalize
    double epsilon = 1e-3;
    unsigned parallelism = 1;
};

struct AnalysisConfig {
    std::vector<double> sweep_lrs = {1e-3, 1e-4, 1e-5};
    std::uint32_t bin_width = 5;
    std::uint32_t smooth_window = 5;
    std::uint32_t proxy_samples = 600;
    bool proxy_per_step_norms = false;
};

struct SelectionSection {
    std::uint32_t candidate_size = 64;
    std::uint32_t retain_size = 32;
    std::uint32_t horizon = 10;
    std::string scorer = "adamw";  // adamw | sgd | random
    std::uint32_t probe_size = 16;
    std::uint32_t epochs = 10;
    double keep_ratio = 0.9;  // offline
    std::vector<std::uint32_t> k_grid = {2, 5, 10, 25};
    std::vector<double> lr_grid = {1e-2, 1e-3, 1e-4};
    std::uint32_t seeds = 3;
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "out";
    DatasetConfig dataset;
    ModelConfig model;
    OptimizerConfig optimizer;
    ScheduleConfig schedule;
    MaskConfig mask;
    AttributionConfig attribution;
    OracleConfig oracle;
    AnalysisConfig analysis;
    SelectionSection selection;

    // Parse + validate, apply --set overrides ("section.key=value"), throw
    // invalid_input_error listing offending paths.
    static ExperimentConfig load(const std::string& path,
                                 const std::vector<std::string>& overrides);
    static ExperimentConfig from_json_text(
        const std::string& text, const std::vector<std::string>& overrides);

    // Canonical (sorted-key) JSON dump and its digest.
    std::string canonical_json() const;
    std::uint64_t digest() const;
    void write_resolved(const std::string& path) const;

    RngStream root_stream() const { return RngStream{seed, 0}; }
    ModelSpec model_spec(std::uint32_t input_dim,
                         std::uint32_t num_classes) const;
    OptimConfig optim_config(std::uint32_t total_steps) const;
    Estimator estimator() const;
    RemovalMode removal_mode() const;
    Scorer scorer() const;
};

struct LoadedData {
    Dataset train, val, test;
    std::vector<std::uint32_t> noisy_ids;
};

// Materializes the dataset section (generating, loading IDX, or reading
// gen-data outputs) deterministically from the global seed.
LoadedData load_data(const ExperimentConfig& cfg);

}  // namespace trajattr
