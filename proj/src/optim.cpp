// SPDX-License-Identifier: Apache-2.0
#include "trajattr/optim.hpp"

#include <cmath>
#include <sstream>

#include "trajattr/errors.hpp"

namespace trajattr {

double LrSchedule::lr_at(std::uint32_t t) const {
    if (kind == LrKind::constant) return base_lr;
    // Linear warmup to base_lr, then linear decay toward 0, staying positive
    // for every t < total_steps.
    if (warmup_steps > 0 && t < warmup_steps)
        return base_lr * static_cast<double>(t + 1) /
               static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    const double remaining = static_cast<double>(total_steps) -
                             static_cast<double>(t);
    const double span = static_cast<double>(total_steps - warmup_steps);
    return base_lr * std::max(remaining, 1.0) / span;
}

std::string OptimConfig::to_string() const {
    std::ostringstream os;
    os.precision(17);
    os << (algo == OptimAlgo::adamw ? "adamw" : "sgd") << ";b1=" << beta1
       << ";b2=" << beta2 << ";eps=" << eps << ";wd=" << weight_decay
       << ";plain=" << (plain_sgd_mode ? 1 : 0)
       << ";lr_kind=" << (schedule.kind == LrKind::constant ? "const" : "warmup")
       << ";lr=" << schedule.base_lr << ";warmup=" << schedule.warmup_steps
       << ";total=" << schedule.total_steps;
    return os.str();
}

OptimConfig OptimConfig::parse(const std::string& text) {
    OptimConfig cfg;
    std::stringstream ss(text);
    std::string tok;
    std::getline(ss, tok, ';');
    if (tok == "adamw")
        cfg.algo = OptimAlgo::adamw;
    else if (tok == "sgd")
        cfg.algo = OptimAlgo::sgd;
    else
        throw format_error("OptimConfig::parse: unknown algo " + tok);
    while (std::getline(ss, tok, ';')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw format_error("OptimConfig::parse: bad field " + tok);
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "b1") cfg.beta1 = std::stod(val);
        else if (key == "b2") cfg.beta2 = std::stod(val);
        else if (key == "eps") cfg.eps = std::stod(val);
        else if (key == "wd") cfg.weight_decay = std::stod(val);
        else if (key == "plain") cfg.plain_sgd_mode = val == "1";
        else if (key == "lr_kind")
            cfg.schedule.kind = val == "const"
                                    ? LrKind::constant
                                    : LrKind::linear_warmup_then_linear_decay;
        else if (key == "lr") cfg.schedule.base_lr = std::stod(val);
        else if (key == "warmup")
            cfg.schedule.warmup_steps = static_cast<std::uint32_t>(std::stoul(val));
        else if (key == "total")
            cfg.schedule.total_steps = static_cast<std::uint32_t>(std::stoul(val));
        else
            throw format_error("OptimConfig::parse: unknown key " + key);
    }
    return cfg;
}

void update_moments(std::span<const double> g, OptimState& state,
                    const OptimConfig& cfg) {
    if (g.size() != state.m.size() || g.size() != state.v.size())
        throw invalid_input_error("update_moments: dimension mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    }
}

BiasCorrections bias_corrections(std::uint32_t t, const OptimConfig& cfg) {
    if (cfg.plain_sgd_mode) return {1.0, 1.0};
    return {1.0 - std::pow(cfg.beta1, static_cast<double>(t) + 1.0),
            1.0 - std::pow(cfg.beta2, static_cast<double>(t) + 1.0)};
}

void adamw_step(std::span<double> theta, std::span<const double> g,
                OptimState& state, const OptimConfig& cfg) {
    if (theta.size() != g.size() || theta.size() != state.m.size())
        throw invalid_input_error("adamw_step: dimension mismatch");
    const std::uint32_t t = state.step_count;
    const double lr = cfg.schedule.lr_at(t);
    update_moments(g, state, cfg);
    const auto [bc1, bc2] = bias_corrections(t, cfg);
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double m_hat = state.m[i] / bc1;
        const double denom =
            cfg.plain_sgd_mode ? 1.0 : std::sqrt(state.v[i] / bc2) + cfg.eps;
        theta[i] = decay * theta[i] - lr * m_hat / denom;
        if (!std::isfinite(theta[i]))
            throw numeric_error("adamw_step: non-finite update at step " +
                                std::to_string(t));
    }
    state.step_count = t + 1;
}

void sgd_step(std::span<double> theta, std::span<const double> g, double lr) {
    if (theta.size() != g.size())
        throw invalid_input_error("sgd_step: dimension mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] = theta[i] - lr * g[i];
        if (!std::isfinite(theta[i]))
            throw numeric_error("sgd_step: non-finite update");
    }
}

}  // namespace trajattr
