// SPDX-License-Identifier: Apache-2.0
#include "trajattr/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "trajattr/errors.hpp"

namespace trajattr {

DiagFactors diag_factors(std::span<const double> m, std::span<const double> v,
                         std::uint32_t t, const OptimConfig& cfg) {
    if (m.size() != v.size())
        throw invalid_input_error("diag_factors: dimension mismatch");
    const std::size_t s = m.size();
    DiagFactors df{Vec(s, 0.0), Vec(s, 0.0)};
    if (cfg.plain_sgd_mode) {
        // Denominator forced to 1: d = I, s = 0.
        std::fill(df.d.begin(), df.d.end(), 1.0);
        return df;
    }
    const auto [bc1, bc2] = bias_corrections(t, cfg);
    for (std::size_t i = 0; i < s; ++i) {
        const double v_hat = v[i] / bc2;
        const double m_hat = m[i] / bc1;
        const double root = std::sqrt(v_hat);
        const double denom = root + cfg.eps;
        df.d[i] = 1.0 / denom;
        df.s[i] = m_hat / (2.0 * std::max(root, kVhatFloor) * denom * denom);
    }
    return df;
}

PushState push_state(std::span<const double> g_z_mean,
                     std::span<const double> g_t, std::span<const double> m_t,
                     std::span<const double> v_t, std::uint32_t t, double eta,
                     const OptimConfig& cfg) {
    const std::size_t s = g_z_mean.size();
    if (g_t.size() != s || m_t.size() != s || v_t.size() != s)
        throw invalid_input_error("push_state: dimension mismatch");
    const DiagFactors df = diag_factors(m_t, v_t, t, cfg);
    const auto [bc1, bc2] = bias_corrections(t, cfg);

    PushState z = PushState::zeros(static_cast<std::uint32_t>(s));
    for (std::size_t i = 0; i < s; ++i) {
        z.m_dot[i] = -(1.0 - cfg.beta1) * g_z_mean[i];
        z.v_dot[i] = -2.0 * (1.0 - cfg.beta2) * g_t[i] * g_z_mean[i];
        z.theta_dot[i] = -eta * (df.d[i] * z.m_dot[i] / bc1 -
                                 df.s[i] * z.v_dot[i] / bc2);
    }
    return z;
}

SummaryMatrix SummaryMatrix::terminal(std::uint32_t s) {
    SummaryMatrix w;
    w.theta = Mat::identity(s);
    w.m = Mat(s, s);
    w.v = Mat(s, s);
    return w;
}

Vec SummaryMatrix::apply(const PushState& z) const {
    const std::size_t s = theta.rows;
    if (z.theta_dot.size() != s)
        throw invalid_input_error("SummaryMatrix::apply: dimension mismatch");
    Vec out(s, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        const double* rt = theta.row(i);
        const double* rm = m.row(i);
        const double* rv = v.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j)
            acc += rt[j] * z.theta_dot[j] + rm[j] * z.m_dot[j] +
                   rv[j] * z.v_dot[j];
        out[i] = acc;
    }
    return out;
}

namespace {

inline void count(OpCounter* ops, std::uint64_t n) {
    if (ops) ops->fmadds += n;
}

// y = W^(t+1) R_t g for one raw per-sample gradient, exploiting the block
// structure of R_t:
//   r1 = -(eta(1-b1)/bc1) d.g  +  (2 eta(1-b2)/bc2) s.g_t.g
//   y  = W_theta r1 + (1-b1) W_m g + 2(1-b2) W_v (g_t.g)
Vec apply_w_r(const SummaryMatrix& w, std::span<const double> g_raw,
              const StepRecord& rec, const DiagFactors& df,
              const BiasCorrections& bc, const OptimConfig& cfg,
              OpCounter* ops) {
    const std::size_t s = g_raw.size();
    const double c1 = -rec.eta * (1.0 - cfg.beta1) / bc.bc1;
    const double c2 = 2.0 * rec.eta * (1.0 - cfg.beta2) / bc.bc2;
    Vec r1(s, 0.0), gg(s, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        gg[i] = rec.g[i] * g_raw[i];
        r1[i] = c1 * df.d[i] * g_raw[i] + c2 * df.s[i] * gg[i];
    }
    Vec y(s, 0.0);
    const double km = 1.0 - cfg.beta1;
    const double kv = 2.0 * (1.0 - cfg.beta2);
    for (std::size_t i = 0; i < s; ++i) {
        const double* rt = w.theta.row(i);
        const double* rm = w.m.row(i);
        const double* rv = w.v.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j)
            acc += rt[j] * r1[j] + km * rm[j] * g_raw[j] + kv * rv[j] * gg[j];
        y[i] = acc;
    }
    count(ops, 3ull * s * s);
    return y;
}

// In-place W <- W M_t + (1/b) DW, with DW confined to the theta block
// (the rank-one updates carry u^T = (g^T, 0, 0)).
void apply_w_m(SummaryMatrix& w, const Mat& dw_theta, std::uint32_t b,
               const StepRecord& rec, const DiagFactors& df,
               const BiasCorrections& bc, const OptimConfig& cfg,
               OpCounter* ops) {
    const std::size_t s = w.theta.rows;
    const double cm = -rec.eta * cfg.beta1 / bc.bc1;
    const double cv = rec.eta * cfg.beta2 / bc.bc2;
    const double decay = 1.0 - rec.eta * cfg.weight_decay;
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < s; ++i) {
        double* rt = w.theta.row(i);
        double* rm = w.m.row(i);
        double* rv = w.v.row(i);
        const double* rd = dw_theta.row(i);
        for (std::size_t j = 0; j < s; ++j) {
            const double wt = rt[j];
            rm[j] = cm * wt * df.d[j] + cfg.beta1 * rm[j];
            rv[j] = cv * wt * df.s[j] + cfg.beta2 * rv[j];
            rt[j] = decay * wt + inv_b * rd[j];
        }
    }
    count(ops, 6ull * s * s);
}

}  // namespace

std::vector<AttributionRecord> backward_adamw_influence(
    const StepSource& steps, const OptimConfig& cfg, OpCounter* ops) {
    const std::uint32_t T = steps.num_steps();
    const std::uint32_t s = steps.mask_size();
    SummaryMatrix w = SummaryMatrix::terminal(s);
    std::vector<AttributionRecord> records;

    Vec g_z_mean(s, 0.0);
    for (std::uint32_t step = T; step-- > 0;) {
        const StepRecord rec = steps.get(step);
        const std::uint32_t b = rec.batch_size();
        const DiagFactors df = diag_factors(rec.m, rec.v, step, cfg);
        const BiasCorrections bc = bias_corrections(step, cfg);
        const double inv_b = 1.0 / static_cast<double>(b);

        // Emission with the current W, which equals W^(t+1).
        for (std::uint32_t j = 0; j < b; ++j) {
            const double* row = rec.per_sample_grads.row(j);
            for (std::uint32_t i = 0; i < s; ++i)
                g_z_mean[i] = row[i] * inv_b;
            const PushState z =
                push_state(g_z_mean, rec.g, rec.m, rec.v, step, rec.eta, cfg);
            AttributionRecord out;
            out.sample_id = rec.sample_ids[j];
            out.t_star = step;
            out.delta_theta = w.apply(z);
            count(ops, 3ull * s * s);
            require_finite(out.delta_theta,
                           "backward_adamw_influence at step " +
                               std::to_string(step));
            records.push_back(std::move(out));
        }

        // W^(t) = W^(t+1) M_t + (1/b) sum_z (W^(t+1) R_t g_z) g_z^T P.
        Mat dw_theta(s, s);
        for (std::uint32_t j = 0; j < b; ++j) {
            const std::span<const double> g_raw{rec.per_sample_grads.row(j),
                                                s};
            const Vec y = apply_w_r(w, g_raw, rec, df, bc, cfg, ops);
            rank_one_update(dw_theta, 1.0, y, g_raw);
            count(ops, 1ull * s * s);
        }
        apply_w_m(w, dw_theta, b, rec, df, bc, cfg, ops);
        if (!all_finite(w.theta.data) || !all_finite(w.m.data) ||
            !all_finite(w.v.data))
            throw numeric_error(
                "backward_adamw_influence: non-finite summary matrix at "
                "step " +
                std::to_string(step));
    }

    std::reverse(records.begin(), records.end());
    for (std::size_t t = 0, i = 0; i < records.size(); ++t) {
        // Restore within-batch order (reversal flipped whole steps only).
        std::size_t j = i;
        while (j < records.size() && records[j].t_star == records[i].t_star)
            ++j;
        std::reverse(records.begin() + static_cast<std::ptrdiff_t>(i),
                     records.begin() + static_cast<std::ptrdiff_t>(j));
        i = j;
    }
    return records;
}

std::vector<AttributionRecord> backward_sgd_influence(const StepSource& steps,
                                                      OpCounter* ops) {
    const std::uint32_t T = steps.num_steps();
    const std::uint32_t s = steps.mask_size();
    // V^(t) = I - W^(t) directly; terminal V = I.
    Mat v_mat = Mat::identity(s);
    std::vector<AttributionRecord> records;

    for (std::uint32_t step = T; step-- > 0;) {
        const StepRecord rec = steps.get(step);
        const std::uint32_t b = rec.batch_size();
        const double inv_b = 1.0 / static_cast<double>(b);

        // Emission: (eta_t / b) V g_z, with V = V^(t).
        std::vector<Vec> vg(b);
        for (std::uint32_t j = 0; j < b; ++j) {
            const std::span<const double> g_raw{rec.per_sample_grads.row(j),
                                                s};
            vg[j].resize(s);
            matvec(v_mat, g_raw, vg[j]);
            count(ops, 1ull * s * s);
            AttributionRecord out;
            out.sample_id = rec.sample_ids[j];
            out.t_star = step;
            out.delta_theta = vg[j];
            scale(out.delta_theta, rec.eta * inv_b);
            require_finite(out.delta_theta,
                           "backward_sgd_influence at step " +
                               std::to_string(step));
            records.push_back(std::move(out));
        }
        // V^(t-1) = V^(t) (I - eta_t H_t) with the GGN H_t.
        for (std::uint32_t j = 0; j < b; ++j) {
            const std::span<const double> g_raw{rec.per_sample_grads.row(j),
                                                s};
            rank_one_update(v_mat, -rec.eta * inv_b, vg[j], g_raw);
            count(ops, 1ull * s * s);
        }
    }

    std::reverse(records.begin(), records.end());
    for (std::size_t i = 0; i < records.size();) {
        std::size_t j = i;
        while (j < records.size() && records[j].t_star == records[i].t_star)
            ++j;
        std::reverse(records.begin() + static_cast<std::ptrdiff_t>(i),
                     records.begin() + static_cast<std::ptrdiff_t>(j));
        i = j;
    }
    return records;
}

std::vector<PushState> forward_propagate(const PushState& z,
                                         const StepSource& steps,
                                         std::uint32_t t_begin,
                                         std::uint32_t t_end,
                                         const OptimConfig& cfg,
                                         OpCounter* ops) {
    if (t_end < t_begin || t_end > steps.num_steps())
        throw invalid_input_error("forward_propagate: bad step range");
    const std::uint32_t s = steps.mask_size();
    if (z.dim() != s)
        throw invalid_input_error("forward_propagate: dimension mismatch");

    std::vector<PushState> path;
    path.reserve(t_end - t_begin + 1);
    path.push_back(z);

    Vec hv(s, 0.0);
    for (std::uint32_t t = t_begin; t < t_end; ++t) {
        const StepRecord rec = steps.get(t);
        const PushState& cur = path.back();
        ggn_vec_from_rows(rec.per_sample_grads, cur.theta_dot, hv);
        count(ops, 2ull * rec.batch_size() * s);

        // Bias corrections follow the record's absolute step index, which
        // may differ from the position when propagating over a sub-view.
        const DiagFactors df = diag_factors(rec.m, rec.v, rec.t, cfg);
        const BiasCorrections bc = bias_corrections(rec.t, cfg);
        const double decay = 1.0 - rec.eta * cfg.weight_decay;

        PushState next = PushState::zeros(s);
        for (std::uint32_t i = 0; i < s; ++i) {
            next.m_dot[i] =
                cfg.beta1 * cur.m_dot[i] + (1.0 - cfg.beta1) * hv[i];
            next.v_dot[i] = cfg.beta2 * cur.v_dot[i] +
                            2.0 * (1.0 - cfg.beta2) * rec.g[i] * hv[i];
            next.theta_dot[i] =
                decay * cur.theta_dot[i] -
                rec.eta * (df.d[i] * next.m_dot[i] / bc.bc1 -
                           df.s[i] * next.v_dot[i] / bc.bc2);
        }
        require_finite(next.theta_dot,
                       "forward_propagate at step " + std::to_string(t));
        path.push_back(std::move(next));
    }
    return path;
}

void sgd_forward_step(Vec& theta_dot, const StepRecord& rec, OpCounter* ops) {
    Vec hv(theta_dot.size(), 0.0);
    ggn_vec_from_rows(rec.per_sample_grads, theta_dot, hv);
    count(ops, 2ull * rec.batch_size() * theta_dot.size());
    axpy(-rec.eta, hv, theta_dot);
}

double influence_score(const AttributionRecord& rec,
                       std::span<const double> val_grad_masked) {
    return dot(rec.delta_theta, val_grad_masked);
}

Mat score_records(const std::vector<AttributionRecord>& records,
                  const Mat& val_grads_masked) {
    Mat scores(records.size(), val_grads_masked.rows);
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t v = 0; v < val_grads_masked.rows; ++v)
            scores.at(r, v) =
                dot(records[r].delta_theta, val_grads_masked.row_span(v));
    return scores;
}

Mat validation_gradients(const SampleLossModel& model,
                         std::span<const double> theta, const Dataset& val,
                         std::span<const std::uint32_t> val_ids) {
    Mat rows(val_ids.size(), model.param_dim());
    for (std::size_t i = 0; i < val_ids.size(); ++i)
        model.grad(theta, val, val_ids[i], {rows.row(i), rows.cols});
    return rows;
}

ScoredAttribution ensemble_attribute(
    const SampleLossModel& model, const ModelSpec& spec, const Dataset& train,
    const OptimConfig& cfg, const BatchSchedule& schedule, const Vec& theta0,
    std::span<const Mask> masks, const Mat& val_grads_full,
    Estimator estimator) {
    if (masks.empty())
        throw invalid_input_error("ensemble_attribute: need at least 1 mask");

    ScoredAttribution out;
    for (std::size_t k = 0; k < masks.size(); ++k) {
        const Mask& mask = masks[k];
        RecordResult run = record_training(model, spec, train, cfg, schedule,
                                           mask, theta0);
        const auto records =
            estimator == Estimator::adamw
                ? backward_adamw_influence(*run.steps, cfg)
                : backward_sgd_influence(*run.steps);

        Mat val_masked(val_grads_full.rows, mask.size());
        for (std::size_t v = 0; v < val_grads_full.rows; ++v)
            mask.restrict(val_grads_full.row_span(v),
                          {val_masked.row(v), val_masked.cols});
        const Mat member = score_records(records, val_masked);

        if (k == 0) {
            out.sample_ids.reserve(records.size());
            out.t_stars.reserve(records.size());
            for (const auto& r : records) {
                out.sample_ids.push_back(r.sample_id);
                out.t_stars.push_back(r.t_star);
            }
            out.scores = member;
        } else {
            if (member.rows != out.scores.rows)
                throw invalid_input_error(
                    "ensemble_attribute: member record count mismatch");
            for (std::size_t i = 0; i < member.data.size(); ++i)
                out.scores.data[i] += member.data[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(masks.size());
    scale(out.scores.data, inv);
    return out;
}

}  // namespace trajattr
