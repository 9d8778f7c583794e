// SPDX-License-Identifier: Apache-2.0
//
// Records, persists, and replays everything the backward recurrences consume:
// per-step sample ids, masked per-sample gradients, batch gradient, moment
// states, and learning rate.
//
// On-disk layout of a cache directory:
//   manifest.txt   key=value text, format version "trajattr-v1",
//                  including the byte offset of every step frame
//   steps.bin      per-step frames: header (t, b, |S|), payload
//                  (sample_ids, per_sample_grads row-major, g, m, v, eta),
//                  then an FNV-1a checksum of the frame
//   theta0.bin     full-dimensional initial parameters, f64 little-endian
//   thetaT.bin     full-dimensional final parameters
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trajattr/datasets.hpp"
#include "trajattr/mask.hpp"
#include "trajattr/models.hpp"
#include "trajattr/optim.hpp"

namespace trajattr {

inline constexpr const char* kTrajectoryFormatVersion = "trajattr-v1";

struct StepRecord {
    std::uint32_t t = 0;
    std::vector<std::uint32_t> sample_ids;  // b
    Mat per_sample_grads;                   // b x |S|, raw (not divided by b)
    Vec g;                                  // |S|, batch mean
    Vec m;                                  // |S|, post-update first moment
    Vec v;                                  // |S|, post-update second moment
    double eta = 0.0;

    std::uint32_t batch_size() const {
        return static_cast<std::uint32_t>(sample_ids.size());
    }
};

struct TrajectoryManifest {
    std::string format_version = kTrajectoryFormatVersion;
    std::string run_id;
    ModelSpec model;
    OptimConfig optim;
    std::uint32_t n = 0;
    std::uint32_t batch_size = 0;
    std::uint32_t epochs = 0;
    std::uint64_t schedule_seed = 0;
    std::uint64_t schedule_stream = 0;
    std::uint32_t p = 0;
    double mask_keep_ratio = 1.0;
    std::uint64_t mask_seed = 0;
    std::uint64_t mask_stream = 0;
    std::uint32_t mask_size = 0;
    std::uint32_t num_steps = 0;
    std::string precision = "f64";
    std::vector<std::uint64_t> step_offsets;

    void save(const std::string& path) const;
    static TrajectoryManifest load(const std::string& path);
};

// Abstract step access so attribution passes run identically off the disk
// cache or an in-memory recording.
class StepSource {
  public:
    virtual ~StepSource() = default;
    virtual std::uint32_t num_steps() const = 0;
    virtual std::uint32_t mask_size() const = 0;
    virtual StepRecord get(std::uint32_t t) const = 0;
    // Number of get() calls served; the cost contract asserts one per step.
    virtual std::uint64_t reads() const = 0;
};

class MemorySteps final : public StepSource {
  public:
    MemorySteps(std::vector<StepRecord> steps, std::uint32_t mask_size)
        : steps_(std::move(steps)), mask_size_(mask_size) {}
    std::uint32_t num_steps() const override {
        return static_cast<std::uint32_t>(steps_.size());
    }
    std::uint32_t mask_size() const override { return mask_size_; }
    StepRecord get(std::uint32_t t) const override;
    std::uint64_t reads() const override { return reads_; }
    const std::vector<StepRecord>& steps() const { return steps_; }

  private:
    std::vector<StepRecord> steps_;
    std::uint32_t mask_size_ = 0;
    mutable std::uint64_t reads_ = 0;
};

// Reads step frames with O(1) seeks via the manifest offset index; never
// holds more than one step in memory.
class TrajectoryReader final : public StepSource {
  public:
    explicit TrajectoryReader(const std::string& dir);

    const TrajectoryManifest& manifest() const { return manifest_; }
    std::uint32_t num_steps() const override { return manifest_.num_steps; }
    std::uint32_t mask_size() const override { return manifest_.mask_size; }
    StepRecord get(std::uint32_t t) const override;
    std::uint64_t reads() const override { return reads_; }

    Vec theta0() const;
    Vec thetaT() const;
    Mask mask() const;
    // Batches reconstructed from the recorded sample ids, in step order.
    BatchSchedule schedule() const;

  private:
    std::string dir_;
    TrajectoryManifest manifest_;
    mutable std::uint64_t reads_ = 0;
};

// ----------------------------- training engine ----------------------------

// Deterministic single-threaded reference loop shared by the recorder, the
// TSLOO oracle, and the determinism probe. Step order defines the trajectory.
struct TrainOptions {
    // Optional gradient substitution, e.g. leave-one-out at one step. Runs
    // after per-sample grads and their mean are computed, before the step.
    std::function<void(std::uint32_t t, const Mat& grad_rows, Vec& g)>
        modify_grad;
    // Observes every step after the optimizer transition. `state` holds the
    // post-update moments entering D_t/S_t.
    std::function<void(std::uint32_t t, const std::vector<std::uint32_t>& ids,
                       const Mat& grad_rows, const Vec& g,
                       const OptimState& state, double eta)>
        on_step;
    // Sums per-sample gradients in a deterministically permuted order; used
    // only by the determinism probe to expose the reduction-order floor.
    bool permuted_reduction = false;
};

// Runs the schedule from theta0 and returns theta_T.
Vec run_training(const SampleLossModel& model, const Dataset& data,
                 const OptimConfig& cfg, const BatchSchedule& schedule,
                 Vec theta0, const TrainOptions& options = {});

// ----------------------------- recording ----------------------------------

struct RecordResult {
    Vec theta0;
    Vec thetaT;
    std::shared_ptr<MemorySteps> steps;
    TrajectoryManifest manifest;
};

// Trains and caches one StepRecord per step. If `out_dir` is nonempty the
// cache is also written to disk in the format above. `precision` is "f64"
// (default) or "f32"; the single-precision cache halves the payload and is
// excluded from the oracle-tolerance tests.
RecordResult record_training(const SampleLossModel& model,
                             const ModelSpec& spec, const Dataset& data,
                             const OptimConfig& cfg,
                             const BatchSchedule& schedule, const Mask& mask,
                             Vec theta0, const std::string& out_dir = "",
                             const std::string& run_id = "run",
                             const std::string& precision = "f64");

void write_vec(const std::string& path, std::span<const double> x);
Vec read_vec(const std::string& path);

}  // namespace trajattr
