// SPDX-License-Identifier: Apache-2.0
#include "trajattr/trajectory.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "trajattr/errors.hpp"

namespace trajattr {

namespace fs = std::filesystem;

// ----------------------------- small binary io ----------------------------

void write_vec(const std::string& path, std::span<const double> x) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_vec: cannot open " + path);
    const std::uint64_t n = x.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(x.data()),
              static_cast<std::streamsize>(n * 8));
    if (!out) throw io_error("write_vec: write failed for " + path);
}

Vec read_vec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("read_vec: cannot open " + path);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    Vec x(n, 0.0);
    in.read(reinterpret_cast<char*>(x.data()),
            static_cast<std::streamsize>(n * 8));
    if (!in) throw format_error("read_vec: truncated file " + path);
    return x;
}

// ----------------------------- manifest -----------------------------------

void TrajectoryManifest::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("manifest: cannot open " + path);
    out.precision(17);
    out << "format_version=" << format_version << "\n"
        << "run_id=" << run_id << "\n"
        << "model=" << model.to_string() << "\n"
        << "optim=" << optim.to_string() << "\n"
        << "n=" << n << "\n"
        << "batch_size=" << batch_size << "\n"
        << "epochs=" << epochs << "\n"
        << "schedule_seed=" << schedule_seed << "\n"
        << "schedule_stream=" << schedule_stream << "\n"
        << "p=" << p << "\n"
        << "mask_keep_ratio=" << mask_keep_ratio << "\n"
        << "mask_seed=" << mask_seed << "\n"
        << "mask_stream=" << mask_stream << "\n"
        << "mask_size=" << mask_size << "\n"
        << "num_steps=" << num_steps << "\n"
        << "precision=" << precision << "\n";
    out << "step_offsets=";
    for (std::size_t i = 0; i < step_offsets.size(); ++i)
        out << (i ? "," : "") << step_offsets[i];
    out << "\n";
    if (!out) throw io_error("manifest: write failed for " + path);
}

TrajectoryManifest TrajectoryManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("manifest: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw format_error("manifest: malformed line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end())
            throw format_error("manifest: missing key " + key);
        return it->second;
    };
    TrajectoryManifest m;
    m.format_version = need("format_version");
    if (m.format_version != kTrajectoryFormatVersion)
        throw format_error("manifest: unsupported format version " +
                           m.format_version + " (expected " +
                           kTrajectoryFormatVersion + ")");
    m.run_id = need("run_id");
    m.model = ModelSpec::parse(need("model"));
    m.optim = OptimConfig::parse(need("optim"));
    m.n = static_cast<std::uint32_t>(std::stoul(need("n")));
    m.batch_size = static_cast<std::uint32_t>(std::stoul(need("batch_size")));
    m.epochs = static_cast<std::uint32_t>(std::stoul(need("epochs")));
    m.schedule_seed = std::stoull(need("schedule_seed"));
    m.schedule_stream = std::stoull(need("schedule_stream"));
    m.p = static_cast<std::uint32_t>(std::stoul(need("p")));
    m.mask_keep_ratio = std::stod(need("mask_keep_ratio"));
    m.mask_seed = std::stoull(need("mask_seed"));
    m.mask_stream = std::stoull(need("mask_stream"));
    m.mask_size = static_cast<std::uint32_t>(std::stoul(need("mask_size")));
    m.num_steps = static_cast<std::uint32_t>(std::stoul(need("num_steps")));
    m.precision = need("precision");
    std::stringstream offs(need("step_offsets"));
    std::string tok;
    while (std::getline(offs, tok, ','))
        if (!tok.empty()) m.step_offsets.push_back(std::stoull(tok));
    if (m.step_offsets.size() != m.num_steps)
        throw format_error("manifest: offset index does not cover all steps");
    return m;
}

// ----------------------------- step framing -------------------------------

namespace {

void append_bytes(std::string& buf, const void* p, std::size_t len) {
    buf.append(static_cast<const char*>(p), len);
}

void append_reals(std::string& buf, const Vec& xs, bool f32) {
    if (!f32) {
        append_bytes(buf, xs.data(), 8ull * xs.size());
        return;
    }
    for (double x : xs) {
        const float f = static_cast<float>(x);
        append_bytes(buf, &f, 4);
    }
}

std::string encode_step(const StepRecord& rec, bool f32) {
    std::string buf;
    const std::uint32_t b = rec.batch_size();
    const auto s = static_cast<std::uint32_t>(rec.g.size());
    append_bytes(buf, &rec.t, 4);
    append_bytes(buf, &b, 4);
    append_bytes(buf, &s, 4);
    append_bytes(buf, rec.sample_ids.data(), 4ull * b);
    append_reals(buf, rec.per_sample_grads.data, f32);
    append_reals(buf, rec.g, f32);
    append_reals(buf, rec.m, f32);
    append_reals(buf, rec.v, f32);
    append_bytes(buf, &rec.eta, 8);
    const std::uint64_t checksum = fnv1a64(buf.data(), buf.size());
    append_bytes(buf, &checksum, 8);
    return buf;
}

}  // namespace

// ----------------------------- training engine ----------------------------

Vec run_training(const SampleLossModel& model, const Dataset& data,
                 const OptimConfig& cfg, const BatchSchedule& schedule,
                 Vec theta, const TrainOptions& options) {
    const std::uint32_t p = model.param_dim();
    if (theta.size() != p)
        throw invalid_input_error("run_training: theta dim mismatch");
    OptimState state = OptimState::zeros(p);
    Vec g(p, 0.0);

    for (std::uint32_t t = 0; t < schedule.num_steps(); ++t) {
        const auto& ids = schedule.steps[t];
        const Mat rows = per_sample_grads(model, theta, data, ids);

        // Batch mean, accumulated per coordinate in sample order so the
        // recorded g is bit-identical to any later mean over the rows.
        std::fill(g.begin(), g.end(), 0.0);
        if (!options.permuted_reduction) {
            for (std::size_t j = 0; j < rows.rows; ++j) {
                const double* r = rows.row(j);
                for (std::uint32_t i = 0; i < p; ++i) g[i] += r[i];
            }
        } else {
            // Deterministic permutation of the reduction order; perturbs
            // floating-point summation without changing the math.
            for (std::size_t off = 0; off < rows.rows; ++off) {
                const std::size_t j =
                    (off * 7919 + static_cast<std::size_t>(t)) % rows.rows;
                const double* r = rows.row(j);
                for (std::uint32_t i = 0; i < p; ++i) g[i] += r[i];
            }
        }
        const double inv = 1.0 / static_cast<double>(rows.rows);
        for (std::uint32_t i = 0; i < p; ++i) g[i] *= inv;

        if (options.modify_grad) options.modify_grad(t, rows, g);

        const double eta = cfg.schedule.lr_at(t);
        if (cfg.algo == OptimAlgo::adamw) {
            adamw_step(theta, g, state, cfg);
        } else {
            // SGD path still accumulates the shadow moments so AdamW-style
            // estimators can be evaluated on SGD-recorded trajectories.
            update_moments(g, state, cfg);
            sgd_step(theta, g, eta);
            state.step_count = t + 1;
        }
        if (options.on_step) options.on_step(t, ids, rows, g, state, eta);
    }
    return theta;
}

// ----------------------------- recording ----------------------------------

StepRecord MemorySteps::get(std::uint32_t t) const {
    if (t >= steps_.size())
        throw invalid_input_error("MemorySteps: step out of range");
    ++reads_;
    return steps_[t];
}

RecordResult record_training(const SampleLossModel& model,
                             const ModelSpec& spec, const Dataset& data,
                             const OptimConfig& cfg,
                             const BatchSchedule& schedule, const Mask& mask,
                             Vec theta0, const std::string& out_dir,
                             const std::string& run_id,
                             const std::string& precision) {
    if (precision != "f64" && precision != "f32")
        throw invalid_input_error("record_training: precision must be f64 or f32");
    const bool f32 = precision == "f32";
    const std::uint32_t p = model.param_dim();
    if (mask.full_dim != p)
        throw invalid_input_error("record_training: mask dim mismatch");
    const std::uint32_t s = mask.size();

    std::vector<StepRecord> steps;
    steps.reserve(schedule.num_steps());

    TrainOptions opts;
    opts.on_step = [&](std::uint32_t t, const std::vector<std::uint32_t>& ids,
                       const Mat& rows, const Vec& g, const OptimState& state,
                       double eta) {
        StepRecord rec;
        rec.t = t;
        rec.sample_ids = ids;
        rec.per_sample_grads = Mat(rows.rows, s);
        for (std::size_t j = 0; j < rows.rows; ++j)
            mask.restrict({rows.row(j), rows.cols},
                          {rec.per_sample_grads.row(j), s});
        rec.g = mask.restrict(g);
        rec.m = mask.restrict(state.m);
        rec.v = mask.restrict(state.v);
        rec.eta = eta;
        steps.push_back(std::move(rec));
    };

    Vec thetaT = run_training(model, data, cfg, schedule, theta0, opts);

    RecordResult result;
    result.theta0 = std::move(theta0);
    result.thetaT = std::move(thetaT);

    TrajectoryManifest& m = result.manifest;
    m.run_id = run_id;
    m.model = spec;
    m.optim = cfg;
    m.n = data.n;
    m.batch_size = schedule.batch_size;
    m.epochs = schedule.epochs;
    m.schedule_seed = schedule.shuffle_seed;
    m.schedule_stream = 0;
    m.p = p;
    m.mask_keep_ratio = mask.keep_ratio;
    m.mask_seed = mask.seed;
    m.mask_stream = mask.stream_id;
    m.mask_size = s;
    m.num_steps = schedule.num_steps();
    m.precision = precision;

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream bin(out_dir + "/steps.bin", std::ios::binary);
        if (!bin)
            throw io_error("record_training: cannot open " + out_dir +
                           "/steps.bin");
        std::uint64_t offset = 0;
        for (const StepRecord& rec : steps) {
            m.step_offsets.push_back(offset);
            const std::string frame = encode_step(rec, f32);
            bin.write(frame.data(),
                      static_cast<std::streamsize>(frame.size()));
            offset += frame.size();
        }
        if (!bin)
            throw io_error("record_training: write failed in " + out_dir);
        bin.close();
        write_vec(out_dir + "/theta0.bin", result.theta0);
        write_vec(out_dir + "/thetaT.bin", result.thetaT);
        m.save(out_dir + "/manifest.txt");
    } else {
        std::uint64_t offset = 0;
        for (const StepRecord& rec : steps) {
            m.step_offsets.push_back(offset);
            offset += 12 + 4ull * rec.batch_size() +
                      8ull * (rec.batch_size() + 3) * s + 16;
        }
    }

    result.steps = std::make_shared<MemorySteps>(std::move(steps), s);
    return result;
}

// ----------------------------- reader --------------------------------------

TrajectoryReader::TrajectoryReader(const std::string& dir) : dir_(dir) {
    manifest_ = TrajectoryManifest::load(dir + "/manifest.txt");
}

StepRecord TrajectoryReader::get(std::uint32_t t) const {
    if (t >= manifest_.num_steps)
        throw invalid_input_error("TrajectoryReader: step out of range");
    std::ifstream in(dir_ + "/steps.bin", std::ios::binary);
    if (!in) throw io_error("TrajectoryReader: cannot open steps.bin");
    in.seekg(static_cast<std::streamoff>(manifest_.step_offsets[t]));

    auto fail = [t](const char* what) -> format_error {
        return format_error("trajectory step " + std::to_string(t) + ": " +
                            what);
    };

    std::uint32_t header[3] = {0, 0, 0};
    in.read(reinterpret_cast<char*>(header), 12);
    if (!in) throw fail("truncated header");
    std::string frame(12, '\0');
    std::memcpy(frame.data(), header, 12);
    const std::uint32_t b = header[1];
    const std::uint32_t s = header[2];
    if (header[0] != t) throw fail("frame index mismatch");
    if (s != manifest_.mask_size) throw fail("mask size mismatch");

    const bool f32 = manifest_.precision == "f32";
    const std::size_t real_size = f32 ? 4 : 8;
    const std::size_t payload =
        4ull * b + real_size * (static_cast<std::size_t>(b) * s + 3ull * s) +
        8;
    frame.resize(12 + payload);
    in.read(frame.data() + 12, static_cast<std::streamsize>(payload));
    if (!in) throw fail("truncated payload");
    std::uint64_t stored_checksum = 0;
    in.read(reinterpret_cast<char*>(&stored_checksum), 8);
    if (!in) throw fail("truncated checksum");
    if (fnv1a64(frame.data(), frame.size()) != stored_checksum)
        throw fail("checksum failure");

    StepRecord rec;
    rec.t = t;
    const char* pos = frame.data() + 12;
    rec.sample_ids.resize(b);
    std::memcpy(rec.sample_ids.data(), pos, 4ull * b);
    pos += 4ull * b;
    auto read_reals = [&](double* out, std::size_t count) {
        if (!f32) {
            std::memcpy(out, pos, 8 * count);
            pos += 8 * count;
            return;
        }
        for (std::size_t i = 0; i < count; ++i) {
            float f = 0.0f;
            std::memcpy(&f, pos, 4);
            out[i] = static_cast<double>(f);
            pos += 4;
        }
    };
    rec.per_sample_grads = Mat(b, s);
    read_reals(rec.per_sample_grads.data.data(),
               static_cast<std::size_t>(b) * s);
    rec.g.resize(s);
    read_reals(rec.g.data(), s);
    rec.m.resize(s);
    read_reals(rec.m.data(), s);
    rec.v.resize(s);
    read_reals(rec.v.data(), s);
    std::memcpy(&rec.eta, pos, 8);
    ++reads_;
    return rec;
}

Vec TrajectoryReader::theta0() const { return read_vec(dir_ + "/theta0.bin"); }
Vec TrajectoryReader::thetaT() const { return read_vec(dir_ + "/thetaT.bin"); }

Mask TrajectoryReader::mask() const {
    Mask mask = build_mask(manifest_.p, manifest_.mask_keep_ratio,
                           RngStream{manifest_.mask_seed,
                                     manifest_.mask_stream});
    if (mask.size() != manifest_.mask_size)
        throw format_error("TrajectoryReader: mask descriptor mismatch");
    return mask;
}

BatchSchedule TrajectoryReader::schedule() const {
    BatchSchedule sched;
    sched.batch_size = manifest_.batch_size;
    sched.epochs = manifest_.epochs;
    sched.shuffle_seed = manifest_.schedule_seed;
    sched.steps.reserve(manifest_.num_steps);
    for (std::uint32_t t = 0; t < manifest_.num_steps; ++t)
        sched.steps.push_back(get(t).sample_ids);
    return sched;
}

}  // namespace trajattr
