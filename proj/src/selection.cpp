// SPDX-License-Identifier: Apache-2.0
#include "trajattr/selection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "trajattr/analysis.hpp"
#include "trajattr/errors.hpp"
#include "trajattr/trajectory.hpp"

namespace trajattr {

namespace {

// Epoch-concatenated permutation stream over 0..n-1. Peeking at future
// positions never advances anything; epochs beyond the configured count stay
// well-defined so look-ahead is always simulable.
class CandidateStream {
  public:
    CandidateStream(std::uint32_t n, RngStream rng) : n_(n), rng_(rng) {}

    std::uint32_t id_at(std::uint64_t pos) const {
        const std::uint64_t epoch = pos / n_;
        const auto idx = static_cast<std::uint32_t>(pos % n_);
        return perm(epoch)[idx];
    }

    // `count` ids starting at `pos`; pads with replacement draws when the
    // pool is smaller than the request within one epoch.
    std::vector<std::uint32_t> chunk(std::uint64_t pos, std::uint32_t count,
                                     std::uint64_t* replacement_flags) const {
        std::vector<std::uint32_t> ids;
        ids.reserve(count);
        if (count <= n_) {
            for (std::uint32_t i = 0; i < count; ++i)
                ids.push_back(id_at(pos + i));
            return ids;
        }
        for (std::uint32_t i = 0; i < n_; ++i) ids.push_back(id_at(pos + i));
        RngCursor extra(rng_.derive("replacement", pos));
        for (std::uint32_t i = n_; i < count; ++i) {
            ids.push_back(static_cast<std::uint32_t>(extra.below(n_)));
            if (replacement_flags) ++*replacement_flags;
        }
        return ids;
    }

  private:
    const std::vector<std::uint32_t>& perm(std::uint64_t epoch) const {
        auto it = perms_.find(epoch);
        if (it == perms_.end()) {
            std::vector<std::uint32_t> p(n_);
            std::iota(p.begin(), p.end(), 0u);
            RngCursor rng(rng_.derive("candidates", epoch));
            shuffle(p, rng);
            it = perms_.emplace(epoch, std::move(p)).first;
        }
        return it->second;
    }

    std::uint32_t n_;
    RngStream rng_;
    mutable std::map<std::uint64_t, std::vector<std::uint32_t>> perms_;
};

std::uint64_t state_hash(std::span<const double> theta,
                         const OptimState& state) {
    std::uint64_t h = fnv1a64(theta.data(), theta.size() * 8);
    h = fnv1a64(state.m.data(), state.m.size() * 8, h);
    h = fnv1a64(state.v.data(), state.v.size() * 8, h);
    h = fnv1a64(&state.step_count, 4, h);
    return h;
}

struct ScratchStep {
    Mat rows;  // raw per-sample gradients, b x p
    Vec g;     // batch mean
    Vec m;     // post-update moments
    Vec v;
    double eta = 0.0;
    std::uint32_t t = 0;
};

// One simulated optimizer transition on a scratch copy of the state.
ScratchStep simulate_step(const Model& model, const Dataset& train,
                          std::span<const std::uint32_t> ids, Vec& theta,
                          OptimState& state, const OptimConfig& optim) {
    ScratchStep step;
    step.t = state.step_count;
    step.eta = optim.schedule.lr_at(step.t);
    step.rows = per_sample_grads(model, theta, train, ids);
    step.g.assign(model.param_dim(), 0.0);
    for (std::size_t j = 0; j < step.rows.rows; ++j)
        axpy(1.0, {step.rows.row(j), step.rows.cols}, step.g);
    scale(step.g, 1.0 / static_cast<double>(step.rows.rows));
    if (optim.algo == OptimAlgo::adamw) {
        adamw_step(theta, step.g, state, optim);
    } else {
        update_moments(step.g, state, optim);
        sgd_step(theta, step.g, step.eta);
        state.step_count = step.t + 1;
    }
    step.m = state.m;
    step.v = state.v;
    return step;
}

// Mean gradient of the probe points at theta.
Vec probe_gradient(const Model& model, std::span<const double> theta,
                   const Dataset& val,
                   std::span<const std::uint32_t> probe_ids) {
    Vec q(model.param_dim(), 0.0), g(model.param_dim(), 0.0);
    for (std::uint32_t id : probe_ids) {
        model.grad(theta, val, id, g);
        axpy(1.0, g, q);
    }
    scale(q, 1.0 / static_cast<double>(probe_ids.size()));
    return q;
}

SelectionTrace finish_trace(const Model& model, const Dataset& val,
                            const Dataset& test, const Vec& theta_final,
                            const Vec& theta_best, SelectionTrace trace) {
    trace.final_val_metric = error_rate(model, theta_final, val);
    trace.final_test_metric = error_rate(model, theta_final, test);
    trace.test_metric_at_best = error_rate(model, theta_best, test);
    return trace;
}

}  // namespace

Vec score_candidates(const Model& model, const Dataset& train,
                     std::span<const std::uint32_t> candidate_ids,
                     std::span<const double> theta, const OptimState& state,
                     const OptimConfig& optim, std::uint32_t t,
                     std::uint32_t horizon,
                     const std::vector<std::vector<std::uint32_t>>&
                         lookahead_batches,
                     std::span<const double> probe_grad, Scorer scorer,
                     OpCounter* ops) {
    const std::uint32_t p = model.param_dim();
    const auto n_cand = static_cast<std::uint32_t>(candidate_ids.size());
    if (lookahead_batches.size() < horizon)
        throw invalid_input_error(
            "score_candidates: not enough look-ahead batches for K");
    if (t != state.step_count)
        throw invalid_input_error(
            "score_candidates: step index disagrees with optimizer state");

    if (scorer == Scorer::random_baseline)
        throw invalid_input_error(
            "score_candidates: random baseline has no gradient score; "
            "handled by select_online");

    // Scratch copy: the real state is never touched.
    Vec theta_sc(theta.begin(), theta.end());
    OptimState state_sc = state;

    // Injection step t executed provisionally on the whole candidate batch.
    const ScratchStep inject =
        simulate_step(model, train, candidate_ids, theta_sc, state_sc, optim);
    if (ops) ops->fmadds += 2ull * n_cand * p;

    // K simulated future steps.
    std::vector<ScratchStep> future;
    future.reserve(horizon);
    for (std::uint32_t k = 0; k < horizon; ++k) {
        future.push_back(simulate_step(model, train, lookahead_batches[k],
                                       theta_sc, state_sc, optim));
        if (ops)
            ops->fmadds += 2ull * future.back().rows.rows * p;
    }

    // Dual propagation: w^T = probe^T P A_{t+K} ... A_{t+1}, so each
    // candidate costs one dot product instead of K GGN products. Identical
    // to scoring probe . theta_dot_{t+K+1} from forward propagation.
    Vec w_theta(probe_grad.begin(), probe_grad.end());
    Vec w_m(p, 0.0), w_v(p, 0.0);
    const bool plain = scorer == Scorer::sgd;
    Vec u(p, 0.0), hu(p, 0.0);
    for (std::uint32_t k = horizon; k-- > 0;) {
        const ScratchStep& st = future[k];
        if (plain) {
            // theta_dot <- (I - eta H) theta_dot transposed: w <- (I - eta H) w.
            ggn_vec_from_rows(st.rows, w_theta, hu);
            axpy(-st.eta, hu, w_theta);
            if (ops) ops->fmadds += 2ull * st.rows.rows * p;
            continue;
        }
        OptimConfig cfg = optim;
        const DiagFactors df = diag_factors(st.m, st.v, st.t, cfg);
        const BiasCorrections bc = bias_corrections(st.t, cfg);
        const double c1 = -st.eta * (1.0 - cfg.beta1) / bc.bc1;
        const double c2 = 2.0 * st.eta * (1.0 - cfg.beta2) / bc.bc2;
        const double cm = -st.eta * cfg.beta1 / bc.bc1;
        const double cv = st.eta * cfg.beta2 / bc.bc2;
        const double decay = 1.0 - st.eta * cfg.weight_decay;
        // u = R_t^T w (diagonal blocks).
        for (std::uint32_t i = 0; i < p; ++i)
            u[i] = (c1 * df.d[i] + c2 * df.s[i] * st.g[i]) * w_theta[i] +
                   (1.0 - cfg.beta1) * w_m[i] +
                   2.0 * (1.0 - cfg.beta2) * st.g[i] * w_v[i];
        ggn_vec_from_rows(st.rows, u, hu);
        if (ops) ops->fmadds += 2ull * st.rows.rows * p;
        // w^T <- w^T M_t + (H u)^T placed in the theta slot.
        for (std::uint32_t i = 0; i < p; ++i) {
            const double wt = w_theta[i];
            w_m[i] = cm * df.d[i] * wt + cfg.beta1 * w_m[i];
            w_v[i] = cv * df.s[i] * wt + cfg.beta2 * w_v[i];
            w_theta[i] = decay * wt + hu[i];
        }
    }

    // Push state per candidate and its dot with the dual vector.
    Vec scores(n_cand, 0.0);
    Vec g_z_mean(p, 0.0);
    const double inv_n = 1.0 / static_cast<double>(n_cand);
    for (std::uint32_t c = 0; c < n_cand; ++c) {
        const double* row = inject.rows.row(c);
        for (std::uint32_t i = 0; i < p; ++i) g_z_mean[i] = row[i] * inv_n;
        double s = 0.0;
        if (plain) {
            // SGD push: theta_dot = eta * g_z / N.
            for (std::uint32_t i = 0; i < p; ++i)
                s += w_theta[i] * inject.eta * g_z_mean[i];
        } else {
            const PushState z = push_state(g_z_mean, inject.g, inject.m,
                                           inject.v, inject.t, inject.eta,
                                           optim);
            for (std::uint32_t i = 0; i < p; ++i)
                s += w_theta[i] * z.theta_dot[i] + w_m[i] * z.m_dot[i] +
                     w_v[i] * z.v_dot[i];
        }
        if (ops) ops->fmadds += p;
        scores[c] = s;
    }
    return scores;
}

SelectionTrace select_online(const Model& model, const Dataset& train,
                             const Dataset& val, const Dataset& test,
                             const OptimConfig& optim,
                             const SelectionConfig& cfg, OpCounter* ops) {
    if (cfg.retain_size == 0 || cfg.retain_size > cfg.candidate_size)
        throw invalid_input_error("select_online: need 0 < B <= N");
    if (cfg.probe_size == 0 || cfg.probe_size > val.n)
        throw invalid_input_error("select_online: bad probe size");

    const std::uint32_t p = model.param_dim();
    const std::uint32_t steps_per_epoch =
        std::max<std::uint32_t>(1, train.n / cfg.candidate_size);
    const std::uint32_t total_steps = steps_per_epoch * cfg.epochs;

    RngCursor probe_rng(cfg.rng.derive("probe"));
    const auto probe_ids =
        sample_without_replacement(val.n, cfg.probe_size, probe_rng);

    CandidateStream stream(train.n, cfg.rng);
    Vec theta = model.init_params();
    OptimState state = OptimState::zeros(p);

    SelectionTrace trace;
    trace.steps.reserve(total_steps);
    Vec theta_best = theta;
    double best_val = 1e300;
    std::uint32_t best_epoch = 0;

    for (std::uint32_t t = 0; t < total_steps; ++t) {
        const std::uint64_t pos =
            static_cast<std::uint64_t>(t / steps_per_epoch) * train.n +
            static_cast<std::uint64_t>(t % steps_per_epoch) *
                cfg.candidate_size;
        const auto candidates =
            stream.chunk(pos, cfg.candidate_size, &trace.replacement_draws);

        Vec scores;
        if (cfg.candidate_size == cfg.retain_size) {
            scores.assign(candidates.size(), 0.0);  // selection inactive
        } else if (cfg.scorer == Scorer::random_baseline) {
            RngCursor rng(cfg.rng.derive("random-scores", t));
            scores.assign(candidates.size(), 0.0);
            for (double& s : scores) s = rng.uniform();
        } else {
            // Pre-draw K provisional batches from the stream continuation.
            std::vector<std::vector<std::uint32_t>> lookahead;
            lookahead.reserve(cfg.horizon);
            for (std::uint32_t k = 1; k <= cfg.horizon; ++k) {
                const std::uint64_t future_step = t + k;
                const std::uint64_t fpos =
                    (future_step / steps_per_epoch) * train.n +
                    (future_step % steps_per_epoch) * cfg.candidate_size;
                lookahead.push_back(stream.chunk(
                    fpos,
                    std::min<std::uint32_t>(cfg.retain_size, train.n),
                    nullptr));
            }
            const Vec probe = probe_gradient(model, theta, val, probe_ids);
            const std::uint64_t before = state_hash(theta, state);
            scores = score_candidates(model, train, candidates, theta, state,
                                      optim, t, cfg.horizon, lookahead, probe,
                                      cfg.scorer, ops);
            if (state_hash(theta, state) != before)
                throw numeric_error(
                    "select_online: scoring touched the real state");
        }

        // Top-B by score, ties by lower sample id; nonfinite scores excluded.
        std::vector<std::uint32_t> order(candidates.size());
        std::iota(order.begin(), order.end(), 0u);
        for (std::uint32_t c : order)
            if (!std::isfinite(scores[c])) ++trace.excluded_candidates;
        std::sort(order.begin(), order.end(),
                  [&](std::uint32_t a, std::uint32_t b) {
                      const bool fa = std::isfinite(scores[a]);
                      const bool fb = std::isfinite(scores[b]);
                      if (fa != fb) return fa;
                      if (fa && scores[a] != scores[b])
                          return scores[a] > scores[b];
                      return candidates[a] < candidates[b];
                  });
        order.resize(cfg.retain_size);
        // Keep the retained batch in draw order so the optimizer's reduction
        // order matches plain training when N == B.
        std::sort(order.begin(), order.end());

        SelectionStepLog log;
        log.t = t;
        for (std::uint32_t c : order) {
            log.chosen.push_back(candidates[c]);
            log.chosen_scores.push_back(scores[c]);
        }

        Vec g(p, 0.0);
        batch_grad(model, theta, train, log.chosen, g);
        if (optim.algo == OptimAlgo::adamw) {
            adamw_step(theta, g, state, optim);
        } else {
            update_moments(g, state, optim);
            sgd_step(theta, g, optim.schedule.lr_at(t));
            state.step_count = t + 1;
        }
        trace.steps.push_back(std::move(log));

        if ((t + 1) % steps_per_epoch == 0) {
            const double v = error_rate(model, theta, val);
            trace.val_metric_per_epoch.push_back(v);
            if (v < best_val) {
                best_val = v;
                best_epoch = (t + 1) / steps_per_epoch - 1;
                theta_best = theta;
            }
        }
    }
    trace.best_val_metric = best_val;
    trace.best_epoch = best_epoch;
    return finish_trace(model, val, test, theta, theta_best,
                        std::move(trace));
}

SelectionTrace plain_train_eval(const Model& model, const Dataset& train,
                                const Dataset& val, const Dataset& test,
                                const OptimConfig& optim,
                                const SelectionConfig& cfg) {
    SelectionConfig plain = cfg;
    plain.candidate_size = cfg.retain_size;  // selection inactive
    plain.scorer = Scorer::random_baseline;
    plain.horizon = 0;
    return select_online(model, train, val, test, optim, plain);
}

SelectionTrace select_offline(const Model& model, const Dataset& train,
                              const Dataset& val, const Dataset& test,
                              const OptimConfig& optim,
                              const SelectionConfig& cfg, double keep_ratio) {
    if (keep_ratio <= 0.0 || keep_ratio > 1.0)
        throw invalid_input_error(
            "select_offline: keep_ratio must be in (0, 1]");

    // Reference pass with the executed batch size.
    const BatchSchedule ref_schedule =
        make_schedule(train.n, cfg.retain_size, cfg.epochs,
                      cfg.rng.derive("ref-schedule"));
    const Mask full = build_mask(model.param_dim(), 1.0, cfg.rng);
    RecordResult ref = record_training(model, model.spec(), train, optim,
                                       ref_schedule, full,
                                       model.init_params());
    const auto records = backward_adamw_influence(*ref.steps, optim);

    RngCursor probe_rng(cfg.rng.derive("probe"));
    const auto probe_ids =
        sample_without_replacement(val.n, cfg.probe_size, probe_rng);
    const Vec probe = probe_gradient(model, ref.thetaT, val, probe_ids);

    // Sum scores per sample across occurrences; higher = more helpful.
    Vec totals(train.n, 0.0);
    for (const auto& rec : records)
        totals[rec.sample_id] += influence_score(rec, probe);

    const auto keep = static_cast<std::uint32_t>(
        std::max<long long>(1, std::llround(keep_ratio * train.n)));
    std::vector<std::uint32_t> by_score(train.n);
    std::iota(by_score.begin(), by_score.end(), 0u);
    std::sort(by_score.begin(), by_score.end(),
              [&](std::uint32_t a, std::uint32_t b) {
                  if (totals[a] != totals[b]) return totals[a] > totals[b];
                  return a < b;
              });
    by_score.resize(keep);
    std::sort(by_score.begin(), by_score.end());

    Dataset subset;
    subset.n = keep;
    subset.d = train.d;
    subset.num_classes = train.num_classes;
    subset.labels.reserve(keep);
    subset.features.reserve(static_cast<std::size_t>(keep) * train.d);
    for (std::uint32_t id : by_score) {
        const auto row = train.row(id);
        subset.features.insert(subset.features.end(), row.begin(), row.end());
        subset.labels.push_back(train.labels[id]);
    }

    // Retrain from scratch on the subset with a fresh schedule.
    SelectionConfig retrain = cfg;
    retrain.rng = cfg.rng.derive("retrain");
    return plain_train_eval(model, subset, val, test, optim, retrain);
}

KSweepResult k_sweep(const std::vector<std::uint32_t>& hidden_dims,
                     const Dataset& train, const Dataset& val,
                     const Dataset& test, const OptimConfig& base_optim,
                     const SelectionConfig& base_cfg,
                     std::span<const std::uint32_t> k_grid,
                     std::span<const double> lr_grid,
                     std::uint32_t num_seeds) {
    if (k_grid.empty() || lr_grid.empty() || num_seeds == 0)
        throw invalid_input_error("k_sweep: empty grid");
    for (double lr : lr_grid)
        if (lr <= 0.0)
            throw invalid_input_error("k_sweep: learning rate must be > 0");

    KSweepResult result;
    // metric[lr][k][seed]
    std::vector<std::vector<Vec>> metric(
        lr_grid.size(), std::vector<Vec>(k_grid.size()));

    for (std::size_t li = 0; li < lr_grid.size(); ++li) {
        for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
            KSweepCell cell;
            cell.horizon = k_grid[ki];
            cell.lr = lr_grid[li];
            for (std::uint32_t s = 0; s < num_seeds; ++s) {
                ModelSpec spec;
                spec.kind = ModelKind::mlp;
                spec.layer_dims.push_back(train.d);
                for (auto h : hidden_dims) spec.layer_dims.push_back(h);
                spec.layer_dims.push_back(train.num_classes);
                spec.init_seed =
                    base_cfg.rng.derive("ksweep-init", s).stream_id;
                const Model model(spec);

                OptimConfig optim = base_optim;
                optim.schedule.base_lr = lr_grid[li];
                SelectionConfig cfg = base_cfg;
                cfg.horizon = k_grid[ki];
                cfg.rng = base_cfg.rng.derive("ksweep-seed", s);

                const SelectionTrace trace =
                    select_online(model, train, val, test, optim, cfg);
                cell.test_metrics.push_back(trace.test_metric_at_best);
            }
            const auto [mean, sd] = mean_std(cell.test_metrics);
            cell.mean = mean;
            cell.stddev = sd;
            metric[li][ki] = cell.test_metrics;
            result.cells.push_back(std::move(cell));
        }
    }

    for (std::size_t li = 0; li < lr_grid.size(); ++li) {
        std::size_t best = 0;
        double best_mean = 1e300;
        for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
            const auto [mean, sd] = mean_std(metric[li][ki]);
            (void)sd;
            if (mean < best_mean) {
                best_mean = mean;
                best = ki;
            }
        }
        result.argmin_k_per_lr.push_back(k_grid[best]);

        std::vector<std::uint32_t> per_seed;
        for (std::uint32_t s = 0; s < num_seeds; ++s) {
            std::size_t bk = 0;
            double bm = 1e300;
            for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
                if (metric[li][ki][s] < bm) {
                    bm = metric[li][ki][s];
                    bk = ki;
                }
            }
            per_seed.push_back(k_grid[bk]);
        }
        result.argmin_k_per_lr_seed.push_back(std::move(per_seed));
    }
    return result;
}

}  // namespace trajattr
