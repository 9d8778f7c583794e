// SPDX-License-Identifier: Apache-2.0
//
// Small differentiable models (softmax-cross-entropy logistic / ReLU MLP)
// with hand-derived backpropagation: per-sample gradients, batch gradients,
// Gauss-Newton products, and a finite-difference Hessian-vector product.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trajattr/core_math.hpp"
#include "trajattr/datasets.hpp"

namespace trajattr {

enum class ModelKind { logistic, mlp };

struct ModelSpec {
    ModelKind kind = ModelKind::logistic;
    // input -> hidden ... -> classes. Logistic has exactly {input, classes}.
    std::vector<std::uint32_t> layer_dims;
    std::uint64_t init_seed = 0;

    std::uint32_t param_count() const;
    std::string to_string() const;
    static ModelSpec parse(const std::string& text);
};

// Anything the training/oracle engines can differentiate sample-by-sample.
class SampleLossModel {
  public:
    virtual ~SampleLossModel() = default;
    virtual std::uint32_t param_dim() const = 0;
    virtual double loss(std::span<const double> theta, const Dataset& data,
                        std::uint32_t id) const = 0;
    // out = gradient of loss at (theta, sample id); overwrites out.
    virtual void grad(std::span<const double> theta, const Dataset& data,
                      std::uint32_t id, std::span<double> out) const = 0;
};

// Parameter flattening is layer-major: for each layer, the (out x in) weight
// matrix row-major, then the bias. The trajectory file format depends on it.
class Model final : public SampleLossModel {
  public:
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    std::uint32_t param_dim() const override { return p_; }

    // Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the spec's init seed.
    Vec init_params() const;

    double loss(std::span<const double> theta, const Dataset& data,
                std::uint32_t id) const override;
    void grad(std::span<const double> theta, const Dataset& data,
              std::uint32_t id, std::span<double> out) const override;

    // Class probabilities for one sample (softmax of the logits).
    Vec predict(std::span<const double> theta, const Dataset& data,
                std::uint32_t id) const;

  private:
    ModelSpec spec_;
    std::uint32_t p_ = 0;
    std::vector<std::uint32_t> w_offsets_;  // per layer: weights, then bias
    std::vector<std::uint32_t> b_offsets_;
};

// Mean of per-sample gradients, accumulated in batch order.
void batch_grad(const SampleLossModel& model, std::span<const double> theta,
                const Dataset& data, std::span<const std::uint32_t> ids,
                std::span<double> out);

// Rows are raw per-sample gradients in batch order (b x p).
Mat per_sample_grads(const SampleLossModel& model,
                     std::span<const double> theta, const Dataset& data,
                     std::span<const std::uint32_t> ids);

// GGN product from precomputed rows: (1/b) sum_z g_z (g_z . v).
void ggn_vec_from_rows(const Mat& grad_rows, std::span<const double> v,
                       std::span<double> out);

// GGN product computing the rows on the fly.
Vec ggn_vec(const SampleLossModel& model, std::span<const double> theta,
            const Dataset& data, std::span<const std::uint32_t> ids,
            std::span<const double> v);

// Central finite-difference Hessian-vector product of the batch loss.
Vec hvp_fd(const SampleLossModel& model, std::span<const double> theta,
           const Dataset& data, std::span<const std::uint32_t> ids,
           std::span<const double> v, double h);

// Mean loss over a set of samples; `ids` empty means the whole dataset.
double mean_loss(const SampleLossModel& model, std::span<const double> theta,
                 const Dataset& data,
                 std::span<const std::uint32_t> ids = {});

// Fraction of samples whose argmax class is wrong (classification only).
double error_rate(const Model& model, std::span<const double> theta,
                  const Dataset& data);

}  // namespace trajattr
