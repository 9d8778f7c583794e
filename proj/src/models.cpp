// SPDX-License-Identifier: Apache-2.0
#include "trajattr/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "trajattr/errors.hpp"

namespace trajattr {

std::uint32_t ModelSpec::param_count() const {
    std::uint32_t p = 0;
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l)
        p += layer_dims[l] * layer_dims[l + 1] + layer_dims[l + 1];
    return p;
}

std::string ModelSpec::to_string() const {
    std::ostringstream os;
    os << (kind == ModelKind::logistic ? "logistic" : "mlp");
    for (auto d : layer_dims) os << ":" << d;
    os << "@" << init_seed;
    return os.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
    ModelSpec spec;
    const auto at = text.find('@');
    if (at == std::string::npos)
        throw format_error("ModelSpec::parse: missing init seed in " + text);
    spec.init_seed = std::stoull(text.substr(at + 1));
    std::stringstream ss(text.substr(0, at));
    std::string tok;
    std::getline(ss, tok, ':');
    if (tok == "logistic")
        spec.kind = ModelKind::logistic;
    else if (tok == "mlp")
        spec.kind = ModelKind::mlp;
    else
        throw format_error("ModelSpec::parse: unknown kind " + tok);
    while (std::getline(ss, tok, ':'))
        spec.layer_dims.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
    return spec;
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    if (spec_.layer_dims.size() < 2)
        throw invalid_input_error("Model: need at least input and class dims");
    if (spec_.kind == ModelKind::logistic && spec_.layer_dims.size() != 2)
        throw invalid_input_error("Model: logistic has exactly 2 dims");
    if (spec_.kind == ModelKind::mlp && spec_.layer_dims.size() < 3)
        throw invalid_input_error("Model: mlp needs at least one hidden layer");
    if (spec_.layer_dims.back() < 1)
        throw invalid_input_error("Model: need at least 1 output class");

    std::uint32_t off = 0;
    for (std::size_t l = 0; l + 1 < spec_.layer_dims.size(); ++l) {
        w_offsets_.push_back(off);
        off += spec_.layer_dims[l] * spec_.layer_dims[l + 1];
        b_offsets_.push_back(off);
        off += spec_.layer_dims[l + 1];
    }
    p_ = off;
}

Vec Model::init_params() const {
    Vec theta(p_, 0.0);
    RngStream base{spec_.init_seed, fnv1a64("model-init")};
    for (std::size_t l = 0; l + 1 < spec_.layer_dims.size(); ++l) {
        const std::uint32_t fan_in = spec_.layer_dims[l];
        const std::uint32_t fan_out = spec_.layer_dims[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        RngCursor rng(base.derive("layer", l));
        double* w = theta.data() + w_offsets_[l];
        for (std::uint32_t i = 0; i < fan_out * fan_in; ++i)
            w[i] = bound * (2.0 * rng.uniform() - 1.0);
        double* b = theta.data() + b_offsets_[l];
        for (std::uint32_t i = 0; i < fan_out; ++i)
            b[i] = bound * (2.0 * rng.uniform() - 1.0);
    }
    return theta;
}

namespace {

// Stable log-sum-exp over logits.
double log_sum_exp(std::span<const double> z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double acc = 0.0;
    for (double v : z) acc += std::exp(v - m);
    return m + std::log(acc);
}

}  // namespace

double Model::loss(std::span<const double> theta, const Dataset& data,
                   std::uint32_t id) const {
    const Vec probs_logits = predict(theta, data, id);  // already probabilities
    const double py = probs_logits[data.labels[id]];
    return -std::log(std::max(py, 1e-300));
}

Vec Model::predict(std::span<const double> theta, const Dataset& data,
                   std::uint32_t id) const {
    if (theta.size() != p_)
        throw invalid_input_error("Model::predict: parameter dim mismatch");
    if (data.d != spec_.layer_dims.front())
        throw invalid_input_error("Model::predict: feature dim mismatch");

    const std::size_t layers = spec_.layer_dims.size() - 1;
    Vec act(data.row(id).begin(), data.row(id).end());
    for (std::size_t l = 0; l < layers; ++l) {
        const std::uint32_t in = spec_.layer_dims[l];
        const std::uint32_t out = spec_.layer_dims[l + 1];
        Vec next(out, 0.0);
        const double* w = theta.data() + w_offsets_[l];
        const double* b = theta.data() + b_offsets_[l];
        for (std::uint32_t i = 0; i < out; ++i) {
            double acc = b[i];
            const double* wr = w + static_cast<std::size_t>(i) * in;
            for (std::uint32_t j = 0; j < in; ++j) acc += wr[j] * act[j];
            next[i] = acc;
        }
        if (l + 1 < layers)
            for (double& v : next) v = v > 0.0 ? v : 0.0;  // ReLU
        act = std::move(next);
    }
    // Softmax.
    const double lse = log_sum_exp(act);
    for (double& v : act) v = std::exp(v - lse);
    return act;
}

void Model::grad(std::span<const double> theta, const Dataset& data,
                 std::uint32_t id, std::span<double> out) const {
    if (theta.size() != p_ || out.size() != p_)
        throw invalid_input_error("Model::grad: dimension mismatch");
    if (data.d != spec_.layer_dims.front())
        throw invalid_input_error("Model::grad: feature dim mismatch");

    const std::size_t layers = spec_.layer_dims.size() - 1;

    // Forward pass keeping pre-activations.
    std::vector<Vec> acts(layers + 1);
    acts[0].assign(data.row(id).begin(), data.row(id).end());
    std::vector<Vec> preacts(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::uint32_t in = spec_.layer_dims[l];
        const std::uint32_t out_dim = spec_.layer_dims[l + 1];
        preacts[l].assign(out_dim, 0.0);
        const double* w = theta.data() + w_offsets_[l];
        const double* b = theta.data() + b_offsets_[l];
        for (std::uint32_t i = 0; i < out_dim; ++i) {
            double acc = b[i];
            const double* wr = w + static_cast<std::size_t>(i) * in;
            for (std::uint32_t j = 0; j < in; ++j) acc += wr[j] * acts[l][j];
            preacts[l][i] = acc;
        }
        acts[l + 1] = preacts[l];
        if (l + 1 < layers)
            for (double& v : acts[l + 1]) v = v > 0.0 ? v : 0.0;
    }

    // dL/dlogits = softmax - onehot(y).
    Vec delta = acts[layers];
    const double lse = log_sum_exp(delta);
    for (double& v : delta) v = std::exp(v - lse);
    delta[data.labels[id]] -= 1.0;

    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t l = layers; l-- > 0;) {
        const std::uint32_t in = spec_.layer_dims[l];
        const std::uint32_t out_dim = spec_.layer_dims[l + 1];
        double* gw = out.data() + w_offsets_[l];
        double* gb = out.data() + b_offsets_[l];
        for (std::uint32_t i = 0; i < out_dim; ++i) {
            const double di = delta[i];
            double* gwr = gw + static_cast<std::size_t>(i) * in;
            for (std::uint32_t j = 0; j < in; ++j) gwr[j] = di * acts[l][j];
            gb[i] = di;
        }
        if (l > 0) {
            const double* w = theta.data() + w_offsets_[l];
            Vec prev(in, 0.0);
            for (std::uint32_t i = 0; i < out_dim; ++i) {
                const double di = delta[i];
                const double* wr = w + static_cast<std::size_t>(i) * in;
                for (std::uint32_t j = 0; j < in; ++j) prev[j] += di * wr[j];
            }
            for (std::uint32_t j = 0; j < in; ++j)
                if (preacts[l - 1][j] <= 0.0) prev[j] = 0.0;
            delta = std::move(prev);
        }
    }
}

void batch_grad(const SampleLossModel& model, std::span<const double> theta,
                const Dataset& data, std::span<const std::uint32_t> ids,
                std::span<double> out) {
    if (ids.empty()) throw invalid_input_error("batch_grad: empty batch");
    const std::uint32_t p = model.param_dim();
    if (out.size() != p)
        throw invalid_input_error("batch_grad: output dim mismatch");
    Vec g(p, 0.0);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::uint32_t id : ids) {
        model.grad(theta, data, id, g);
        for (std::uint32_t i = 0; i < p; ++i) out[i] += g[i];
    }
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (std::uint32_t i = 0; i < p; ++i) out[i] *= inv;
}

Mat per_sample_grads(const SampleLossModel& model,
                     std::span<const double> theta, const Dataset& data,
                     std::span<const std::uint32_t> ids) {
    if (ids.empty())
        throw invalid_input_error("per_sample_grads: empty batch");
    Mat rows(ids.size(), model.param_dim());
    for (std::size_t j = 0; j < ids.size(); ++j)
        model.grad(theta, data, ids[j], {rows.row(j), rows.cols});
    return rows;
}

void ggn_vec_from_rows(const Mat& grad_rows, std::span<const double> v,
                       std::span<double> out) {
    if (grad_rows.rows == 0)
        throw invalid_input_error("ggn_vec: empty batch");
    if (v.size() != grad_rows.cols || out.size() != grad_rows.cols)
        throw invalid_input_error("ggn_vec: dimension mismatch");
    std::fill(out.begin(), out.end(), 0.0);
    const double inv = 1.0 / static_cast<double>(grad_rows.rows);
    for (std::size_t j = 0; j < grad_rows.rows; ++j) {
        const double* g = grad_rows.row(j);
        double acc = 0.0;
        for (std::size_t i = 0; i < grad_rows.cols; ++i) acc += g[i] * v[i];
        acc *= inv;
        for (std::size_t i = 0; i < grad_rows.cols; ++i) out[i] += acc * g[i];
    }
}

Vec ggn_vec(const SampleLossModel& model, std::span<const double> theta,
            const Dataset& data, std::span<const std::uint32_t> ids,
            std::span<const double> v) {
    const Mat rows = per_sample_grads(model, theta, data, ids);
    Vec out(model.param_dim(), 0.0);
    ggn_vec_from_rows(rows, v, out);
    return out;
}

Vec hvp_fd(const SampleLossModel& model, std::span<const double> theta,
           const Dataset& data, std::span<const std::uint32_t> ids,
           std::span<const double> v, double h) {
    if (h <= 0.0) throw invalid_input_error("hvp_fd: h must be > 0");
    const std::uint32_t p = model.param_dim();
    Vec plus(theta.begin(), theta.end());
    Vec minus(theta.begin(), theta.end());
    axpy(h, v, plus);
    axpy(-h, v, minus);
    Vec gp(p, 0.0), gm(p, 0.0);
    batch_grad(model, plus, data, ids, gp);
    batch_grad(model, minus, data, ids, gm);
    Vec out(p, 0.0);
    for (std::uint32_t i = 0; i < p; ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
    require_finite(out, "hvp_fd");
    return out;
}

double mean_loss(const SampleLossModel& model, std::span<const double> theta,
                 const Dataset& data, std::span<const std::uint32_t> ids) {
    double acc = 0.0;
    std::size_t count = 0;
    if (ids.empty()) {
        for (std::uint32_t i = 0; i < data.n; ++i)
            acc += model.loss(theta, data, i);
        count = data.n;
    } else {
        for (std::uint32_t id : ids) acc += model.loss(theta, data, id);
        count = ids.size();
    }
    if (count == 0) throw invalid_input_error("mean_loss: empty set");
    return acc / static_cast<double>(count);
}

double error_rate(const Model& model, std::span<const double> theta,
                  const Dataset& data) {
    std::uint32_t wrong = 0;
    for (std::uint32_t i = 0; i < data.n; ++i) {
        const Vec probs = model.predict(theta, data, i);
        const auto best = static_cast<std::uint32_t>(
            std::max_element(probs.begin(), probs.end()) - probs.begin());
        if (best != data.labels[i]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(data.n);
}

}  // namespace trajattr
