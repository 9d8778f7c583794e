// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: reproducible experiments driven by JSON configs.
// Subcommands write CSV/JSON artifacts plus a manifest of input digests;
// exit 0 on success, nonzero with a machine-readable error record on stderr.
#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trajattr/analysis.hpp"
#include "trajattr/attribution.hpp"
#include "trajattr/config.hpp"
#include "trajattr/errors.hpp"
#include "trajattr/oracle.hpp"
#include "trajattr/selection.hpp"
#include "trajattr/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trajattr;

namespace {

// ----------------------------- formatting + io ----------------------------

std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

std::uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("digest: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return fnv1a64(bytes.data(), bytes.size());
}

// CSV with the resolved-config digest embedded as a header comment.
class CsvWriter {
  public:
    CsvWriter(const std::string& path, std::uint64_t config_digest,
              const std::string& header)
        : out_(path) {
        if (!out_) throw io_error("csv: cannot open " + path);
        out_ << "# config_digest=" << hex64(config_digest) << "\n"
             << header << "\n";
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }
    ~CsvWriter() { out_.flush(); }

  private:
    std::ofstream out_;
};

struct CsvContent {
    std::string digest;
    std::string header;
    std::vector<std::string> rows;
};

CsvContent read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("csv: cannot open " + path);
    CsvContent content;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# config_digest=", 0) != 0)
        throw format_error("csv: missing config digest header in " + path);
    content.digest = line.substr(std::string("# config_digest=").size());
    if (!std::getline(in, content.header))
        throw format_error("csv: missing column header in " + path);
    while (std::getline(in, line))
        if (!line.empty()) content.rows.push_back(line);
    return content;
}

// Keyed per-record blob: count, dim, then (sample_id, t_star, f64[dim]).
void write_keyed_vectors(const std::string& path,
                         const std::vector<RecordKey>& keys,
                         const std::vector<Vec>& vectors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open " + path);
    const std::uint64_t count = keys.size();
    const std::uint64_t dim = vectors.empty() ? 0 : vectors.front().size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    out.write(reinterpret_cast<const char*>(&dim), 8);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        out.write(reinterpret_cast<const char*>(&keys[i].sample_id), 4);
        out.write(reinterpret_cast<const char*>(&keys[i].t_star), 4);
        out.write(reinterpret_cast<const char*>(vectors[i].data()),
                  static_cast<std::streamsize>(8 * dim));
    }
    if (!out) throw io_error("write failed for " + path);
}

void read_keyed_vectors(const std::string& path, std::vector<RecordKey>& keys,
                        std::vector<Vec>& vectors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    std::uint64_t count = 0, dim = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    in.read(reinterpret_cast<char*>(&dim), 8);
    keys.resize(count);
    vectors.assign(count, Vec(dim, 0.0));
    for (std::uint64_t i = 0; i < count; ++i) {
        in.read(reinterpret_cast<char*>(&keys[i].sample_id), 4);
        in.read(reinterpret_cast<char*>(&keys[i].t_star), 4);
        in.read(reinterpret_cast<char*>(vectors[i].data()),
                static_cast<std::streamsize>(8 * dim));
    }
    if (!in) throw format_error("truncated keyed blob " + path);
}

void write_run_manifest(const std::string& dir,
                        const ExperimentConfig& config,
                        const std::vector<std::string>& inputs) {
    json j;
    j["config_digest"] = hex64(config.digest());
    json ins = json::object();
    for (const auto& path : inputs)
        if (fs::exists(path)) ins[path] = hex64(file_digest(path));
    j["inputs"] = ins;
    std::ofstream out(dir + "/run_manifest.json");
    out << j.dump(2) << "\n";
}

// ----------------------------- shared assembly ----------------------------

struct Workspace {
    ExperimentConfig config;
    LoadedData data;
    ModelSpec spec;
    std::unique_ptr<Model> model;
    BatchSchedule schedule;
    OptimConfig optim;
    std::vector<std::uint32_t> val_ids;

    std::string traj_dir() const { return config.out_dir + "/traj"; }
    std::string attr_dir(const std::string& est) const {
        return config.out_dir + "/attr/" + est;
    }
    std::string tsloo_dir() const { return config.out_dir + "/tsloo"; }
};

Workspace make_workspace(const ExperimentConfig& config) {
    Workspace ws;
    ws.config = config;
    ws.data = load_data(config);
    ws.spec = config.model_spec(ws.data.train.d, ws.data.train.num_classes);
    ws.model = std::make_unique<Model>(ws.spec);
    ws.schedule = make_schedule(ws.data.train.n, config.schedule.batch_size,
                                config.schedule.epochs,
                                config.root_stream().derive("schedule"));
    ws.optim = config.optim_config(ws.schedule.num_steps());
    const std::uint32_t nv =
        std::min(config.oracle.num_val, ws.data.val.n);
    ws.val_ids.resize(nv);
    std::iota(ws.val_ids.begin(), ws.val_ids.end(), 0u);
    return ws;
}

void require_artifact(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw dependency_error("missing artifact " + path +
                                   "; run `" + producer + "` first",
                               producer);
}

// Estimator records over the disk cache plus per-validation-point scores.
struct AttributionArtifacts {
    std::vector<RecordKey> keys;
    std::vector<Vec> deltas;
    Mat scores_by_val;
};

void write_scores_matrix(const std::string& path, const Mat& scores) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open " + path);
    const std::uint64_t rows = scores.rows, cols = scores.cols;
    out.write(reinterpret_cast<const char*>(&rows), 8);
    out.write(reinterpret_cast<const char*>(&cols), 8);
    out.write(reinterpret_cast<const char*>(scores.data.data()),
              static_cast<std::streamsize>(scores.data.size() * 8));
}

Mat read_scores_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    std::uint64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 8);
    in.read(reinterpret_cast<char*>(&cols), 8);
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * 8));
    if (!in) throw format_error("truncated score matrix " + path);
    return m;
}

std::vector<RecordKey> read_keys_from_csv(const CsvContent& csv) {
    std::vector<RecordKey> keys;
    for (const auto& row : csv.rows) {
        RecordKey k;
        if (std::sscanf(row.c_str(), "%u,%u", &k.sample_id, &k.t_star) != 2)
            throw format_error("csv: bad key row: " + row);
        keys.push_back(k);
    }
    return keys;
}

// ----------------------------- subcommands --------------------------------

int cmd_gen_data(const ExperimentConfig& config) {
    const LoadedData data = load_data(config);
    const std::string dir = config.out_dir + "/data";
    fs::create_directories(dir);
    save_dataset(data.train, dir + "/train.bin");
    save_dataset(data.val, dir + "/val.bin");
    save_dataset(data.test, dir + "/test.bin");
    json noise;
    noise["noisy_ids"] = data.noisy_ids;
    std::ofstream(dir + "/noise.json") << noise.dump() << "\n";
    config.write_resolved(dir + "/config.resolved.json");
    write_run_manifest(dir, config, {});
    std::printf("gen-data: n_train=%u n_val=%u n_test=%u d=%u classes=%u\n",
                data.train.n, data.val.n, data.test.n, data.train.d,
                data.train.num_classes);
    return 0;
}

int cmd_train(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    const Mask mask =
        build_mask(ws.model->param_dim(), config.mask.keep_ratio,
                   config.root_stream().derive("mask", 0));
    const std::string dir = ws.traj_dir();
    fs::create_directories(dir);
    const RecordResult result = record_training(
        *ws.model, ws.spec, ws.data.train, ws.optim, ws.schedule, mask,
        ws.model->init_params(), dir, "run-" + hex64(config.digest()));
    config.write_resolved(dir + "/config.resolved.json");
    write_run_manifest(dir, config, {dir + "/steps.bin"});
    std::printf("train: T=%u p=%u |S|=%u train_loss=%s\n",
                result.manifest.num_steps, result.manifest.p,
                result.manifest.mask_size,
                fmt_double(mean_loss(*ws.model, result.thetaT, ws.data.train))
                    .c_str());
    return 0;
}

AttributionArtifacts run_estimator_on_cache(const Workspace& ws,
                                            Estimator which) {
    TrajectoryReader reader(ws.traj_dir());
    const Mask mask = reader.mask();
    const Vec thetaT = reader.thetaT();
    const auto records = which == Estimator::adamw
                             ? backward_adamw_influence(
                                   reader, reader.manifest().optim)
                             : backward_sgd_influence(reader);

    const Mat val_full = validation_gradients(*ws.model, thetaT, ws.data.val,
                                              ws.val_ids);
    Mat val_masked(val_full.rows, mask.size());
    for (std::size_t v = 0; v < val_full.rows; ++v)
        mask.restrict(val_full.row_span(v), {val_masked.row(v), mask.size()});

    AttributionArtifacts art;
    art.scores_by_val = score_records(records, val_masked);
    for (const auto& rec : records) {
        art.keys.push_back({rec.sample_id, rec.t_star});
        art.deltas.push_back(rec.delta_theta);
    }
    return art;
}

int cmd_attribute(const ExperimentConfig& config,
                  const std::string& estimator_flag) {
    Workspace ws = make_workspace(config);
    require_artifact(ws.traj_dir() + "/manifest.txt", "train");
    const std::string est =
        estimator_flag.empty() ? config.attribution.estimator : estimator_flag;
    const std::string dir = ws.attr_dir(est);
    fs::create_directories(dir);

    AttributionArtifacts art;
    if (est == "ensemble") {
        TrajectoryReader reader(ws.traj_dir());
        std::vector<Mask> masks;
        for (std::uint32_t k = 0; k < config.mask.ensemble; ++k)
            masks.push_back(build_mask(ws.model->param_dim(),
                                       config.mask.keep_ratio,
                                       config.root_stream().derive("mask", k)));
        const Mat val_full = validation_gradients(
            *ws.model, reader.thetaT(), ws.data.val, ws.val_ids);
        const ScoredAttribution scored = ensemble_attribute(
            *ws.model, ws.spec, ws.data.train, ws.optim, ws.schedule,
            reader.theta0(), masks, val_full, Estimator::adamw);
        for (std::size_t i = 0; i < scored.sample_ids.size(); ++i)
            art.keys.push_back({scored.sample_ids[i], scored.t_stars[i]});
        art.scores_by_val = scored.scores;
    } else if (est == "adamw" || est == "sgd") {
        art = run_estimator_on_cache(
            ws, est == "adamw" ? Estimator::adamw : Estimator::sgd);
        write_keyed_vectors(dir + "/deltas.bin", art.keys, art.deltas);
    } else {
        throw invalid_input_error("attribute: unknown estimator " + est);
    }

    write_scores_matrix(dir + "/scores_by_val.bin", art.scores_by_val);
    CsvWriter csv(dir + "/scores.csv", config.digest(),
                  "sample_id,t_star,score_val_mean");
    for (std::size_t r = 0; r < art.keys.size(); ++r) {
        double mean = 0.0;
        for (std::size_t v = 0; v < art.scores_by_val.cols; ++v)
            mean += art.scores_by_val.at(r, v);
        mean /= static_cast<double>(art.scores_by_val.cols);
        csv.row({std::to_string(art.keys[r].sample_id),
                 std::to_string(art.keys[r].t_star), fmt_double(mean)});
    }
    config.write_resolved(dir + "/config.resolved.json");
    write_run_manifest(dir, config, {ws.traj_dir() + "/steps.bin"});
    std::printf("attribute: estimator=%s records=%zu\n", est.c_str(),
                art.keys.size());
    return 0;
}

// Replay setup from the recorded cache; verifies bit-identical replay once.
ReplaySetup replay_setup_from_cache(const Workspace& ws,
                                    const TrajectoryReader& reader) {
    ReplaySetup setup;
    setup.model = ws.model.get();
    setup.train = &ws.data.train;
    setup.optim = reader.manifest().optim;
    setup.schedule = reader.schedule();
    setup.theta0 = reader.theta0();
    const Vec replayed = run_training(*setup.model, *setup.train, setup.optim,
                                      setup.schedule, setup.theta0);
    const Vec cached = reader.thetaT();
    for (std::size_t i = 0; i < cached.size(); ++i)
        if (replayed[i] != cached[i])
            throw numeric_error(
                "tsloo: replay does not reproduce the recorded trajectory");
    return setup;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> pick_tsloo_jobs(
    const Workspace& ws, const TrajectoryReader& reader) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> all;
    for (std::uint32_t t = 0; t < reader.num_steps(); ++t)
        for (std::uint32_t id : reader.get(t).sample_ids)
            all.emplace_back(id, t);
    const auto want = std::min<std::size_t>(ws.config.oracle.num_samples,
                                            all.size());
    RngCursor rng(ws.config.root_stream().derive("tsloo-pick"));
    const auto picks = sample_without_replacement(
        static_cast<std::uint32_t>(all.size()),
        static_cast<std::uint32_t>(want), rng);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> jobs;
    for (std::uint32_t k : picks) jobs.push_back(all[k]);
    return jobs;
}

int cmd_tsloo(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    require_artifact(ws.traj_dir() + "/manifest.txt", "train");
    TrajectoryReader reader(ws.traj_dir());
    const Mask mask = reader.mask();
    const Vec thetaT = reader.thetaT();
    const ReplaySetup setup = replay_setup_from_cache(ws, reader);
    const auto jobs = pick_tsloo_jobs(ws, reader);
    const RemovalMode mode = config.removal_mode();

    const auto records =
        tsloo_batch(setup, mask, thetaT, *ws.model, ws.data.val, ws.val_ids,
                    jobs, mode, config.oracle.parallelism);

    const std::string dir = ws.tsloo_dir();
    fs::create_directories(dir);
    CsvWriter csv(dir + "/tsloo.csv", config.digest(),
                  "sample_id,t_star,removal_mode,val_id,loss_delta");
    std::vector<RecordKey> keys;
    std::vector<Vec> deltas;
    Mat by_val(records.size(), ws.val_ids.size());
    for (std::size_t r = 0; r < records.size(); ++r) {
        const TSLOORecord& rec = records[r];
        keys.push_back({rec.sample_id, rec.t_star});
        deltas.push_back(rec.delta_theta_masked);
        for (std::size_t v = 0; v < ws.val_ids.size(); ++v) {
            by_val.at(r, v) = rec.loss_deltas[v];
            csv.row({std::to_string(rec.sample_id),
                     std::to_string(rec.t_star), removal_mode_name(rec.mode),
                     std::to_string(ws.val_ids[v]),
                     fmt_double(rec.loss_deltas[v])});
        }
    }
    write_keyed_vectors(dir + "/deltas.bin", keys, deltas);
    write_scores_matrix(dir + "/deltas_by_val.bin", by_val);
    config.write_resolved(dir + "/config.resolved.json");
    write_run_manifest(dir, config, {ws.traj_dir() + "/steps.bin"});
    std::printf("tsloo: records=%zu mode=%s\n", records.size(),
                removal_mode_name(mode).c_str());
    return 0;
}

int cmd_fidelity(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    require_artifact(ws.tsloo_dir() + "/tsloo.csv", "tsloo");
    std::vector<RecordKey> oracle_keys;
    std::vector<Vec> oracle_deltas_masked;
    read_keyed_vectors(ws.tsloo_dir() + "/deltas.bin", oracle_keys,
                       oracle_deltas_masked);
    const Mat oracle_by_val =
        read_scores_matrix(ws.tsloo_dir() + "/deltas_by_val.bin");

    CsvWriter csv(config.out_dir + "/fidelity.csv", config.digest(),
                  "setting,lr,estimator,rho_mean,rho_std,num_samples,num_val");
    bool any = false;
    for (const std::string est : {"adamw", "sgd", "ensemble"}) {
        const std::string dir = ws.attr_dir(est);
        if (!fs::exists(dir + "/scores.csv")) continue;
        any = true;
        const CsvContent scores_csv = read_csv(dir + "/scores.csv");
        const auto est_keys = read_keys_from_csv(scores_csv);
        const Mat est_scores = read_scores_matrix(dir + "/scores_by_val.bin");
        const FidelityReport report = fidelity(
            est_keys, est_scores, oracle_keys, oracle_by_val, est);
        csv.row({config.dataset.kind + "+" + config.model.kind,
                 fmt_double(config.optimizer.lr), est,
                 fmt_double(report.rho_mean), fmt_double(report.rho_std),
                 std::to_string(report.num_samples),
                 std::to_string(est_scores.cols)});
        std::printf("fidelity: %s rho=%.4f +- %.4f\n", est.c_str(),
                    report.rho_mean, report.rho_std);
    }
    if (!any)
        throw dependency_error(
            "fidelity: no attribution outputs found; run `attribute` first",
            "attribute");
    write_run_manifest(config.out_dir, config,
                       {ws.tsloo_dir() + "/tsloo.csv"});
    return 0;
}

int cmd_decompose(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    require_artifact(ws.tsloo_dir() + "/deltas.bin", "tsloo");
    require_artifact(ws.attr_dir("adamw") + "/deltas.bin", "attribute");
    require_artifact(ws.attr_dir("sgd") + "/deltas.bin", "attribute");
    TrajectoryReader reader(ws.traj_dir());
    const Mask mask = reader.mask();

    std::vector<RecordKey> oracle_keys, adamw_keys, sgd_keys;
    std::vector<Vec> oracle_deltas, adamw_deltas, sgd_deltas;
    read_keyed_vectors(ws.tsloo_dir() + "/deltas.bin", oracle_keys,
                       oracle_deltas);
    read_keyed_vectors(ws.attr_dir("adamw") + "/deltas.bin", adamw_keys,
                       adamw_deltas);
    read_keyed_vectors(ws.attr_dir("sgd") + "/deltas.bin", sgd_keys,
                       sgd_deltas);
    const Mat oracle_by_val =
        read_scores_matrix(ws.tsloo_dir() + "/deltas_by_val.bin");

    // Aggregate validation gradient (mean over the fidelity validation set),
    // masked; aggregate TSLOO delta is the matching mean of loss deltas.
    const Vec thetaT = reader.thetaT();
    const Mat val_full = validation_gradients(*ws.model, thetaT, ws.data.val,
                                              ws.val_ids);
    Vec val_agg(mask.size(), 0.0);
    {
        Vec full_mean(val_full.cols, 0.0);
        for (std::size_t v = 0; v < val_full.rows; ++v)
            axpy(1.0, val_full.row_span(v), full_mean);
        scale(full_mean, 1.0 / static_cast<double>(val_full.rows));
        mask.restrict(full_mean, val_agg);
    }

    std::map<RecordKey, std::size_t> adamw_index, sgd_index;
    for (std::size_t i = 0; i < adamw_keys.size(); ++i)
        adamw_index[adamw_keys[i]] = i;
    for (std::size_t i = 0; i < sgd_keys.size(); ++i)
        sgd_index[sgd_keys[i]] = i;

    Vec tsloo_agg(oracle_keys.size(), 0.0);
    Vec sgd_scores(oracle_keys.size(), 0.0);
    Vec adamw_scores(oracle_keys.size(), 0.0);
    std::vector<Vec> truth(oracle_keys.size()), est(oracle_keys.size());
    for (std::size_t k = 0; k < oracle_keys.size(); ++k) {
        const auto ai = adamw_index.find(oracle_keys[k]);
        const auto si = sgd_index.find(oracle_keys[k]);
        if (ai == adamw_index.end() || si == sgd_index.end())
            throw invalid_input_error(
                "decompose: oracle record missing from estimator outputs");
        double agg = 0.0;
        for (std::size_t v = 0; v < oracle_by_val.cols; ++v)
            agg += oracle_by_val.at(k, v);
        tsloo_agg[k] = agg / static_cast<double>(oracle_by_val.cols);
        adamw_scores[k] = dot(adamw_deltas[ai->second], val_agg);
        sgd_scores[k] = dot(sgd_deltas[si->second], val_agg);
        truth[k] = oracle_deltas[k];
        est[k] = adamw_deltas[ai->second];
    }

    const auto bins = error_decomposition(
        oracle_keys, tsloo_agg, sgd_scores, adamw_scores, truth, est, val_agg,
        config.analysis.bin_width);

    CsvWriter csv(config.out_dir + "/decomposition.csv", config.digest(),
                  "bin_start,bin_end,green_mean,blue_mean,grey_mean,"
                  "error_sgd_mean,count");
    for (const auto& bin : bins)
        csv.row({std::to_string(bin.bin_start), std::to_string(bin.bin_end),
                 fmt_double(bin.green_mean), fmt_double(bin.blue_mean),
                 fmt_double(bin.grey_mean), fmt_double(bin.error_sgd_mean),
                 std::to_string(bin.count)});
    write_run_manifest(config.out_dir, config,
                       {ws.tsloo_dir() + "/deltas.bin",
                        ws.attr_dir("adamw") + "/deltas.bin",
                        ws.attr_dir("sgd") + "/deltas.bin"});
    std::printf("decompose: bins=%zu\n", bins.size());
    return 0;
}

int cmd_sweep_factors(const ExperimentConfig& config) {
    // Self-contained: per learning rate, record + attribute + TSLOO on a
    // per-step sample, then emit one curve per lr.
    fs::create_directories(config.out_dir + "/sweep");
    CsvWriter csv(config.out_dir + "/sweep/curves.csv", config.digest(),
                  "lr,step,error_norm_mean,intra_rho,intra_rho_smoothed,"
                  "rho_defined,samples");
    for (const double lr : config.analysis.sweep_lrs) {
        ExperimentConfig variant = config;
        variant.optimizer.lr = lr;
        Workspace ws = make_workspace(variant);
        const Mask mask =
            build_mask(ws.model->param_dim(), variant.mask.keep_ratio,
                       variant.root_stream().derive("mask", 0));
        const RecordResult run =
            record_training(*ws.model, ws.spec, ws.data.train, ws.optim,
                            ws.schedule, mask, ws.model->init_params());
        const auto records = backward_adamw_influence(*run.steps, ws.optim);

        std::map<RecordKey, std::size_t> index;
        for (std::size_t i = 0; i < records.size(); ++i)
            index[{records[i].sample_id, records[i].t_star}] = i;

        ReplaySetup setup{ws.model.get(), &ws.data.train, ws.optim,
                          ws.schedule, run.theta0};
        const Mat val_full = validation_gradients(
            *ws.model, run.thetaT, ws.data.val, ws.val_ids);
        Vec val_agg(mask.size(), 0.0);
        {
            Vec full_mean(val_full.cols, 0.0);
            for (std::size_t v = 0; v < val_full.rows; ++v)
                axpy(1.0, val_full.row_span(v), full_mean);
            scale(full_mean, 1.0 / static_cast<double>(val_full.rows));
            mask.restrict(full_mean, val_agg);
        }

        // Spread the oracle budget over steps.
        const std::uint32_t T = ws.schedule.num_steps();
        const std::uint32_t per_step = std::max<std::uint32_t>(
            2, variant.oracle.num_samples / std::max<std::uint32_t>(1, T));
        std::vector<std::pair<std::uint32_t, std::uint32_t>> jobs;
        RngCursor pick(variant.root_stream().derive("sweep-pick"));
        for (std::uint32_t t = 0; t < T; ++t) {
            const auto& ids = ws.schedule.steps[t];
            const auto take =
                std::min<std::uint32_t>(per_step,
                                        static_cast<std::uint32_t>(ids.size()));
            const auto picks = sample_without_replacement(
                static_cast<std::uint32_t>(ids.size()), take, pick);
            for (auto j : picks) jobs.emplace_back(ids[j], t);
        }
        const auto oracle_records = tsloo_batch(
            setup, mask, run.thetaT, *ws.model, ws.data.val, ws.val_ids, jobs,
            variant.removal_mode(), variant.oracle.parallelism);

        std::vector<RecordKey> keys;
        Vec tsloo_agg, est_scores;
        std::vector<Vec> truth, est;
        for (const auto& rec : oracle_records) {
            const RecordKey key{rec.sample_id, rec.t_star};
            const auto it = index.find(key);
            if (it == index.end()) continue;
            keys.push_back(key);
            double agg = 0.0;
            for (double dlt : rec.loss_deltas) agg += dlt;
            tsloo_agg.push_back(agg /
                                static_cast<double>(rec.loss_deltas.size()));
            est_scores.push_back(
                dot(records[it->second].delta_theta, val_agg));
            truth.push_back(rec.delta_theta_masked);
            est.push_back(records[it->second].delta_theta);
        }
        const SweepCurve curve =
            factor_sweep(keys, tsloo_agg, est_scores, truth, est, T,
                         variant.analysis.smooth_window);
        std::map<std::uint32_t, std::uint32_t> counts;
        for (const auto& k : keys) counts[k.t_star]++;
        for (const auto& pt : curve.points)
            csv.row({fmt_double(lr), std::to_string(pt.t),
                     fmt_double(pt.error_norm_mean), fmt_double(pt.intra_rho),
                     fmt_double(curve.rho_smoothed[pt.t]),
                     pt.rho_defined ? "1" : "0",
                     std::to_string(counts[pt.t])});
        std::printf("sweep-factors: lr=%g steps=%u samples=%zu\n", lr, T,
                    keys.size());
    }
    config.write_resolved(config.out_dir + "/sweep/config.resolved.json");
    write_run_manifest(config.out_dir + "/sweep", config, {});
    return 0;
}

int cmd_proxy(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    require_artifact(ws.traj_dir() + "/manifest.txt", "train");
    require_artifact(ws.tsloo_dir() + "/deltas.bin", "tsloo");
    require_artifact(ws.attr_dir("adamw") + "/deltas.bin", "attribute");
    TrajectoryReader reader(ws.traj_dir());
    const OptimConfig optim = reader.manifest().optim;
    const std::uint32_t T = reader.num_steps();
    // Forward propagation touches each step once per record; keep the cache
    // in memory instead of seeking the blob thousands of times.
    std::vector<StepRecord> all_steps;
    all_steps.reserve(T);
    for (std::uint32_t t = 0; t < T; ++t) all_steps.push_back(reader.get(t));
    const MemorySteps steps(std::move(all_steps), reader.mask_size());

    std::vector<RecordKey> oracle_keys, adamw_keys;
    std::vector<Vec> oracle_deltas, adamw_deltas;
    read_keyed_vectors(ws.tsloo_dir() + "/deltas.bin", oracle_keys,
                       oracle_deltas);
    read_keyed_vectors(ws.attr_dir("adamw") + "/deltas.bin", adamw_keys,
                       adamw_deltas);
    std::map<RecordKey, std::size_t> index;
    for (std::size_t i = 0; i < adamw_keys.size(); ++i)
        index[adamw_keys[i]] = i;

    std::vector<ProxyRecord> proxies;
    const auto limit = std::min<std::size_t>(config.analysis.proxy_samples,
                                             oracle_keys.size());
    for (std::size_t k = 0; k < limit; ++k) {
        const RecordKey key = oracle_keys[k];
        const auto it = index.find(key);
        if (it == index.end())
            throw invalid_input_error(
                "proxy: oracle record missing from adamw attribution");
        const StepRecord rec = steps.get(key.t_star);
        const auto pos = static_cast<std::uint32_t>(
            std::find(rec.sample_ids.begin(), rec.sample_ids.end(),
                      key.sample_id) -
            rec.sample_ids.begin());
        Vec g_z_mean(reader.mask_size(), 0.0);
        const double inv_b = 1.0 / static_cast<double>(rec.batch_size());
        for (std::size_t i = 0; i < g_z_mean.size(); ++i)
            g_z_mean[i] = rec.per_sample_grads.at(pos, i) * inv_b;
        const PushState z = push_state(g_z_mean, rec.g, rec.m, rec.v,
                                       key.t_star, rec.eta, optim);
        // theta_dot over [t*+1, T-1] is all the proxy consumes; the last
        // step has an empty accumulation range.
        std::vector<PushState> path;
        if (key.t_star + 1 < T)
            path = forward_propagate(z, steps, key.t_star + 1, T - 1, optim);
        ProxyRecord pr;
        pr.sample_id = key.sample_id;
        pr.t_star = key.t_star;
        pr.proxy =
            error_proxy_for_sample(steps, optim, key.t_star, path,
                                   config.analysis.proxy_per_step_norms);
        Vec gap = oracle_deltas[k];
        axpy(-1.0, adamw_deltas[it->second], gap);
        pr.error_norm = nrm2(gap);
        proxies.push_back(pr);
    }

    fs::create_directories(config.out_dir + "/proxy");
    CsvWriter csv(config.out_dir + "/proxy/proxy.csv", config.digest(),
                  "sample_id,t_star,proxy,error_norm");
    for (const auto& pr : proxies)
        csv.row({std::to_string(pr.sample_id), std::to_string(pr.t_star),
                 fmt_double(pr.proxy), fmt_double(pr.error_norm)});

    const ProxyFit fit = proxy_fit(proxies);
    CsvWriter fit_csv(config.out_dir + "/proxy/fit.csv", config.digest(),
                      "slope,intercept,r2,rho,used,dropped");
    fit_csv.row({fmt_double(fit.slope), fmt_double(fit.intercept),
                 fmt_double(fit.r2), fmt_double(fit.rho),
                 std::to_string(fit.used), std::to_string(fit.dropped)});
    config.write_resolved(config.out_dir + "/proxy/config.resolved.json");
    write_run_manifest(config.out_dir + "/proxy", config,
                       {ws.traj_dir() + "/steps.bin"});
    std::printf("proxy: records=%zu rho=%.4f slope=%.3f r2=%.3f\n",
                proxies.size(), fit.rho, fit.slope, fit.r2);
    return 0;
}

std::string join_u32(const std::vector<std::uint32_t>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i)
        out += (i ? ";" : "") + std::to_string(xs[i]);
    return out;
}

std::string join_doubles(std::span<const double> xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i)
        out += (i ? ";" : "") + fmt_double(xs[i]);
    return out;
}

int cmd_select(const ExperimentConfig& config, const std::string& mode) {
    Workspace ws = make_workspace(config);
    SelectionConfig sel;
    sel.candidate_size = config.selection.candidate_size;
    sel.retain_size = config.selection.retain_size;
    sel.horizon = config.selection.horizon;
    sel.scorer = config.scorer();
    sel.probe_size = config.selection.probe_size;
    sel.epochs = config.selection.epochs;
    sel.rng = config.root_stream().derive("selection");

    const std::uint32_t steps_per_epoch = std::max<std::uint32_t>(
        1, ws.data.train.n / sel.candidate_size);
    OptimConfig optim = config.optim_config(steps_per_epoch * sel.epochs);

    SelectionTrace trace;
    if (mode == "online") {
        trace = select_online(*ws.model, ws.data.train, ws.data.val,
                              ws.data.test, optim, sel);
    } else if (mode == "offline") {
        trace = select_offline(*ws.model, ws.data.train, ws.data.val,
                               ws.data.test, optim, sel,
                               config.selection.keep_ratio);
    } else {
        throw invalid_input_error("select: mode must be online or offline");
    }

    const std::string dir =
        config.out_dir + "/select/" + mode + "_" + config.selection.scorer;
    fs::create_directories(dir);
    CsvWriter trace_csv(dir + "/trace.csv", config.digest(),
                        "step,chosen_ids,scores");
    for (const auto& step : trace.steps)
        trace_csv.row({std::to_string(step.t), join_u32(step.chosen),
                       join_doubles(step.chosen_scores)});
    CsvWriter summary(dir + "/summary.csv", config.digest(),
                      "mode,scorer,N,B,K,epochs,best_epoch,best_val,"
                      "test_at_best,final_val,final_test,replacement_draws,"
                      "excluded_candidates");
    summary.row({mode, config.selection.scorer,
                 std::to_string(sel.candidate_size),
                 std::to_string(sel.retain_size), std::to_string(sel.horizon),
                 std::to_string(sel.epochs), std::to_string(trace.best_epoch),
                 fmt_double(trace.best_val_metric),
                 fmt_double(trace.test_metric_at_best),
                 fmt_double(trace.final_val_metric),
                 fmt_double(trace.final_test_metric),
                 std::to_string(trace.replacement_draws),
                 std::to_string(trace.excluded_candidates)});
    config.write_resolved(dir + "/config.resolved.json");
    write_run_manifest(dir, config, {});
    std::printf("select %s/%s: best_val=%.4f test_at_best=%.4f\n",
                mode.c_str(), config.selection.scorer.c_str(),
                trace.best_val_metric, trace.test_metric_at_best);
    return 0;
}

int cmd_k_sweep(const ExperimentConfig& config) {
    Workspace ws = make_workspace(config);
    SelectionConfig base;
    base.candidate_size = config.selection.candidate_size;
    base.retain_size = config.selection.retain_size;
    base.scorer = Scorer::adamw;
    base.probe_size = config.selection.probe_size;
    base.epochs = config.selection.epochs;
    base.rng = config.root_stream().derive("selection");

    const std::uint32_t steps_per_epoch = std::max<std::uint32_t>(
        1, ws.data.train.n / base.candidate_size);
    OptimConfig optim = config.optim_config(steps_per_epoch * base.epochs);

    const KSweepResult result =
        k_sweep(config.model.hidden, ws.data.train, ws.data.val, ws.data.test,
                optim, base, config.selection.k_grid, config.selection.lr_grid,
                config.selection.seeds);

    fs::create_directories(config.out_dir + "/ksweep");
    CsvWriter csv(config.out_dir + "/ksweep/summary.csv", config.digest(),
                  "K,lr,metric_mean,metric_std,metrics");
    for (const auto& cell : result.cells)
        csv.row({std::to_string(cell.horizon), fmt_double(cell.lr),
                 fmt_double(cell.mean), fmt_double(cell.stddev),
                 join_doubles(cell.test_metrics)});
    CsvWriter argmin(config.out_dir + "/ksweep/argmin.csv", config.digest(),
                     "lr,argmin_k,argmin_k_per_seed");
    for (std::size_t li = 0; li < config.selection.lr_grid.size(); ++li)
        argmin.row({fmt_double(config.selection.lr_grid[li]),
                    std::to_string(result.argmin_k_per_lr[li]),
                    join_u32(result.argmin_k_per_lr_seed[li])});
    config.write_resolved(config.out_dir + "/ksweep/config.resolved.json");
    write_run_manifest(config.out_dir + "/ksweep", config, {});
    std::printf("k-sweep: cells=%zu\n", result.cells.size());
    return 0;
}

int cmd_report(const ExperimentConfig& config,
               const std::vector<std::string>& inputs) {
    if (inputs.empty())
        throw invalid_input_error("report: need at least one input CSV");
    std::vector<CsvContent> contents;
    for (const auto& path : inputs) contents.push_back(read_csv(path));
    for (std::size_t i = 1; i < contents.size(); ++i)
        if (contents[i].digest != contents[0].digest)
            throw invalid_input_error(
                "report: refusing to merge mismatched config digests (" +
                inputs[0] + " vs " + inputs[i] + ")");

    std::ofstream out(config.out_dir + "/report.csv");
    if (!out) throw io_error("report: cannot open output");
    out << "# config_digest=" << contents[0].digest << "\n";
    out << "source," << contents[0].header << "\n";
    for (std::size_t i = 0; i < contents.size(); ++i) {
        if (contents[i].header != contents[0].header)
            out << "# section " << inputs[i] << ": " << contents[i].header
                << "\n";
        for (const auto& row : contents[i].rows)
            out << inputs[i] << "," << row << "\n";
    }
    std::printf("report: merged %zu files\n", contents.size());
    return 0;
}

void emit_error_record(const std::string& kind, const std::string& message,
                       const std::string& producer = "") {
    json j;
    j["error"]["kind"] = kind;
    j["error"]["message"] = message;
    if (!producer.empty()) j["error"]["producing_command"] = producer;
    std::fprintf(stderr, "%s\n", j.dump().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trajectory-based per-sample influence toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string estimator_flag, select_mode = "online";
    std::vector<std::string> report_inputs;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "JSON config path")
            ->required();
        cmd->add_option("--set", overrides,
                        "override config values (section.key=value)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate dataset files");
    CLI::App* train = app.add_subcommand("train", "record a trajectory");
    CLI::App* attr = app.add_subcommand("attribute", "run an estimator");
    attr->add_option("--estimator", estimator_flag, "adamw | sgd | ensemble");
    CLI::App* tsloo =
        app.add_subcommand("tsloo", "leave-one-out retraining oracle");
    CLI::App* fid = app.add_subcommand("fidelity", "Spearman vs the oracle");
    CLI::App* dec = app.add_subcommand("decompose", "error decomposition");
    CLI::App* sweep =
        app.add_subcommand("sweep-factors", "lr / trajectory-length sweep");
    CLI::App* proxy = app.add_subcommand("proxy", "closed-form error proxy");
    CLI::App* select = app.add_subcommand("select", "data selection");
    select->add_option("--mode", select_mode, "online | offline");
    CLI::App* ksweep = app.add_subcommand("k-sweep", "horizon x lr sweep");
    CLI::App* report = app.add_subcommand("report", "merge CSV outputs");
    report->add_option("--inputs", report_inputs, "CSV files to merge");

    for (CLI::App* cmd :
         {gen, train, attr, tsloo, fid, dec, sweep, proxy, select, ksweep,
          report})
        add_common(cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig config =
            ExperimentConfig::load(config_path, overrides);
        fs::create_directories(config.out_dir);
        if (gen->parsed()) return cmd_gen_data(config);
        if (train->parsed()) return cmd_train(config);
        if (attr->parsed()) return cmd_attribute(config, estimator_flag);
        if (tsloo->parsed()) return cmd_tsloo(config);
        if (fid->parsed()) return cmd_fidelity(config);
        if (dec->parsed()) return cmd_decompose(config);
        if (sweep->parsed()) return cmd_sweep_factors(config);
        if (proxy->parsed()) return cmd_proxy(config);
        if (select->parsed()) return cmd_select(config, select_mode);
        if (ksweep->parsed()) return cmd_k_sweep(config);
        if (report->parsed()) return cmd_report(config, report_inputs);
    } catch (const dependency_error& e) {
        emit_error_record("dependency", e.what(), e.producing_command);
        return 3;
    } catch (const invalid_input_error& e) {
        emit_error_record("invalid_input", e.what());
        return 2;
    } catch (const format_error& e) {
        emit_error_record("format", e.what());
        return 4;
    } catch (const io_error& e) {
        emit_error_record("io", e.what());
        return 4;
    } catch (const numeric_error& e) {
        emit_error_record("numeric", e.what());
        return 5;
    } catch (const std::exception& e) {
        emit_error_record("internal", e.what());
        return 1;
    }
    return 1;
}
