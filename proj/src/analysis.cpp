// SPDX-License-Identifier: Apache-2.0
#include "trajattr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "trajattr/errors.hpp"

namespace trajattr {

std::pair<double, double> mean_std(std::span<const double> xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    return {mean, std::sqrt(var)};
}

FidelityReport fidelity(const std::vector<RecordKey>& est_keys,
                        const Mat& est_scores,
                        const std::vector<RecordKey>& oracle_keys,
                        const Mat& oracle_deltas,
                        const std::string& estimator_tag) {
    if (est_keys.size() != est_scores.rows ||
        oracle_keys.size() != oracle_deltas.rows)
        throw invalid_input_error("fidelity: key/score row mismatch");
    if (est_scores.cols != oracle_deltas.cols)
        throw invalid_input_error(
            "fidelity: validation point count mismatch");

    std::map<RecordKey, std::size_t> index;
    for (std::size_t i = 0; i < est_keys.size(); ++i) index[est_keys[i]] = i;

    std::vector<std::size_t> matched(oracle_keys.size());
    std::string missing;
    std::size_t missing_count = 0;
    for (std::size_t k = 0; k < oracle_keys.size(); ++k) {
        const auto it = index.find(oracle_keys[k]);
        if (it == index.end()) {
            ++missing_count;
            if (missing_count <= 8) {
                std::ostringstream os;
                os << (missing.empty() ? "" : ", ") << "("
                   << oracle_keys[k].sample_id << ","
                   << oracle_keys[k].t_star << ")";
                missing += os.str();
            }
            continue;
        }
        matched[k] = it->second;
    }
    if (missing_count > 0)
        throw invalid_input_error("fidelity: " + std::to_string(missing_count) +
                                  " oracle pairs missing from estimator: " +
                                  missing);

    FidelityReport report;
    report.estimator_tag = estimator_tag;
    report.num_samples = oracle_keys.size();
    report.rho_per_val.resize(est_scores.cols);
    Vec est_col(oracle_keys.size(), 0.0), oracle_col(oracle_keys.size(), 0.0);
    for (std::size_t v = 0; v < est_scores.cols; ++v) {
        for (std::size_t k = 0; k < oracle_keys.size(); ++k) {
            est_col[k] = est_scores.at(matched[k], v);
            oracle_col[k] = oracle_deltas.at(k, v);
        }
        report.rho_per_val[v] = spearman_rho(est_col, oracle_col);
    }
    const auto [mean, sd] = mean_std(report.rho_per_val);
    report.rho_mean = mean;
    report.rho_std = sd;
    return report;
}

std::vector<DecompositionBin> error_decomposition(
    const std::vector<RecordKey>& keys, std::span<const double> tsloo_agg,
    std::span<const double> sgd_scores, std::span<const double> adamw_scores,
    const std::vector<Vec>& delta_theta_true,
    const std::vector<Vec>& delta_theta_adamw,
    std::span<const double> val_grad_agg, std::uint32_t bin_width) {
    const std::size_t n = keys.size();
    if (tsloo_agg.size() != n || sgd_scores.size() != n ||
        adamw_scores.size() != n || delta_theta_true.size() != n ||
        delta_theta_adamw.size() != n)
        throw invalid_input_error("error_decomposition: input size mismatch");
    if (bin_width == 0)
        throw invalid_input_error("error_decomposition: bin_width must be >= 1");

    std::map<std::uint32_t, DecompositionBin> bins;
    Vec gap(val_grad_agg.size(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        if (delta_theta_true[k].size() != val_grad_agg.size())
            throw invalid_input_error(
                "error_decomposition: delta_theta missing or wrong dim");
        const double e_sgd = std::abs(sgd_scores[k] - tsloo_agg[k]);
        const double e_adamw = std::abs(adamw_scores[k] - tsloo_agg[k]);
        const double green = e_sgd - e_adamw;
        for (std::size_t i = 0; i < gap.size(); ++i)
            gap[i] = delta_theta_true[k][i] - delta_theta_adamw[k][i];
        const double blue = std::abs(dot(val_grad_agg, gap));
        const double grey = e_sgd - green - blue;

        const std::uint32_t b = keys[k].t_star / bin_width;
        DecompositionBin& bin = bins[b];
        bin.bin_start = b * bin_width;
        bin.bin_end = bin.bin_start + bin_width;
        bin.green_mean += green;
        bin.blue_mean += blue;
        bin.grey_mean += grey;
        bin.error_sgd_mean += e_sgd;
        bin.count += 1;
    }

    std::vector<DecompositionBin> out;
    out.reserve(bins.size());
    for (auto& [b, bin] : bins) {
        const double inv = 1.0 / static_cast<double>(bin.count);
        bin.green_mean *= inv;
        bin.blue_mean *= inv;
        bin.grey_mean *= inv;
        bin.error_sgd_mean *= inv;
        out.push_back(bin);
    }
    return out;
}

SweepCurve factor_sweep(const std::vector<RecordKey>& keys,
                        std::span<const double> tsloo_agg,
                        std::span<const double> est_scores,
                        const std::vector<Vec>& delta_theta_true,
                        const std::vector<Vec>& delta_theta_est,
                        std::uint32_t num_steps,
                        std::uint32_t smooth_window) {
    const std::size_t n = keys.size();
    if (tsloo_agg.size() != n || est_scores.size() != n ||
        delta_theta_true.size() != n || delta_theta_est.size() != n)
        throw invalid_input_error("factor_sweep: input size mismatch");

    std::vector<std::vector<std::size_t>> by_step(num_steps);
    for (std::size_t k = 0; k < n; ++k) {
        if (keys[k].t_star >= num_steps)
            throw invalid_input_error("factor_sweep: t_star out of range");
        by_step[keys[k].t_star].push_back(k);
    }

    SweepCurve curve;
    curve.points.resize(num_steps);
    for (std::uint32_t t = 0; t < num_steps; ++t) {
        SweepPoint& pt = curve.points[t];
        pt.t = t;
        const auto& members = by_step[t];
        if (members.empty()) continue;

        double norm_acc = 0.0;
        Vec est(members.size(), 0.0), truth(members.size(), 0.0);
        for (std::size_t j = 0; j < members.size(); ++j) {
            const std::size_t k = members[j];
            Vec gap = delta_theta_true[k];
            axpy(-1.0, delta_theta_est[k], gap);
            norm_acc += nrm2(gap);
            est[j] = est_scores[k];
            truth[j] = tsloo_agg[k];
        }
        pt.error_norm_mean = norm_acc / static_cast<double>(members.size());
        if (members.size() >= 2) {
            try {
                pt.intra_rho = spearman_rho(est, truth);
                pt.rho_defined = true;
            } catch (const undefined_correlation_error&) {
                pt.rho_defined = false;  // constant column; skip with notice
            }
        }
    }

    // Smooth only over defined points, then place back.
    Vec defined;
    std::vector<std::size_t> where;
    for (std::size_t t = 0; t < curve.points.size(); ++t) {
        if (curve.points[t].rho_defined) {
            defined.push_back(curve.points[t].intra_rho);
            where.push_back(t);
        }
    }
    curve.rho_smoothed.assign(num_steps, 0.0);
    if (!defined.empty()) {
        const Vec smooth = rolling_mean(defined, smooth_window);
        for (std::size_t j = 0; j < where.size(); ++j)
            curve.rho_smoothed[where[j]] = smooth[j];
    }
    return curve;
}

double error_proxy_for_sample(const StepSource& steps, const OptimConfig& cfg,
                              std::uint32_t t_star,
                              std::span<const PushState> path,
                              bool per_step_norms) {
    const std::uint32_t T = steps.num_steps();
    const std::uint32_t s = steps.mask_size();
    if (t_star + 1 >= T) return 0.0;  // empty accumulation range
    const std::uint32_t needed = T - 1 - (t_star + 1) + 1;
    if (path.size() < needed)
        throw invalid_input_error(
            "error_proxy: theta_dot path does not cover [t_star+1, T-1]");

    Vec r(s, 0.0), rt(s, 0.0), hv(s, 0.0);
    double per_step_acc = 0.0;
    for (std::uint32_t t = t_star + 1; t < T; ++t) {
        const StepRecord rec = steps.get(t);
        const std::span<const double> theta_dot =
            path[t - (t_star + 1)].theta_dot;
        if (theta_dot.size() != s)
            throw invalid_input_error("error_proxy: path dim mismatch");
        const double sq_norm = dot(theta_dot, theta_dot);
        ggn_vec_from_rows(rec.per_sample_grads, theta_dot, hv);
        const auto [bc1, bc2] = bias_corrections(t, cfg);
        (void)bc1;
        for (std::uint32_t i = 0; i < s; ++i) {
            const double v_hat = rec.v[i] / bc2;
            const double root = std::max(std::sqrt(v_hat), kVhatFloor);
            rt[i] = rec.eta * (sq_norm / root + hv[i] * hv[i] / (root * root));
        }
        if (per_step_norms) {
            per_step_acc += nrm2(rt);
        } else {
            axpy(1.0, rt, r);
        }
    }
    return per_step_norms ? per_step_acc : nrm2(r);
}

ProxyFit proxy_fit(std::span<const ProxyRecord> records) {
    Vec px, ex;
    std::size_t dropped = 0;
    for (const ProxyRecord& r : records) {
        if (r.proxy > 0.0 && r.error_norm > 0.0) {
            px.push_back(r.proxy);
            ex.push_back(r.error_norm);
        } else {
            ++dropped;
        }
    }
    if (px.size() < 3)
        throw invalid_input_error(
            "proxy_fit: need at least 3 points with positive proxy and error");

    // Least squares of log(error) on log(proxy).
    const std::size_t n = px.size();
    Vec lx(n, 0.0), ly(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        lx[i] = std::log(px[i]);
        ly[i] = std::log(ex[i]);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
        syy += (ly[i] - my) * (ly[i] - my);
    }
    ProxyFit fit;
    fit.used = n;
    fit.dropped = dropped;
    fit.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    fit.intercept = my - fit.slope * mx;
    fit.r2 = (sxx > 0.0 && syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 1.0;
    fit.rho = spearman_rho(px, ex);
    return fit;
}

}  // namespace trajattr
