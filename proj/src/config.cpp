// SPDX-License-Identifier: Apache-2.0
#include "trajattr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "trajattr/errors.hpp"

namespace trajattr {

using nlohmann::json;

namespace {

// Rejects keys not present in the reference object, recursively.
void check_unknown_keys(const json& doc, const json& reference,
                        const std::string& path,
                        std::vector<std::string>& offenders) {
    if (!doc.is_object()) return;
    for (const auto& [key, value] : doc.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!reference.contains(key)) {
            offenders.push_back(here);
            continue;
        }
        if (value.is_object())
            check_unknown_keys(value, reference.at(key), here, offenders);
    }
}

json defaults_json() {
    const ExperimentConfig d;
    json j;
    j["seed"] = d.seed;
    j["out_dir"] = d.out_dir;
    j["dataset"] = {{"kind", d.dataset.kind},
                    {"n_train", d.dataset.n_train},
                    {"n_val", d.dataset.n_val},
                    {"n_test", d.dataset.n_test},
                    {"d", d.dataset.d},
                    {"classes", d.dataset.classes},
                    {"spread", d.dataset.spread},
                    {"label_noise", d.dataset.label_noise},
                    {"images", d.dataset.images},
                    {"labels", d.dataset.labels},
                    {"test_images", d.dataset.test_images},
                    {"test_labels", d.dataset.test_labels},
                    {"subset_fraction", d.dataset.subset_fraction},
                    {"subset_mode", d.dataset.subset_mode},
                    {"train_path", d.dataset.train_path},
                    {"val_path", d.dataset.val_path},
                    {"test_path", d.dataset.test_path}};
    j["model"] = {{"kind", d.model.kind}, {"hidden", d.model.hidden}};
    j["optimizer"] = {{"algo", d.optimizer.algo},
                      {"lr", d.optimizer.lr},
                      {"beta1", d.optimizer.beta1},
                      {"beta2", d.optimizer.beta2},
                      {"eps", d.optimizer.eps},
                      {"weight_decay", d.optimizer.weight_decay},
                      {"plain_sgd_mode", d.optimizer.plain_sgd_mode},
                      {"schedule", d.optimizer.schedule},
                      {"warmup_steps", d.optimizer.warmup_steps}};
    j["schedule"] = {{"batch_size", d.schedule.batch_size},
                     {"epochs", d.schedule.epochs}};
    j["mask"] = {{"keep_ratio", d.mask.keep_ratio},
                 {"ensemble", d.mask.ensemble}};
    j["attribution"] = {{"estimator", d.attribution.estimator}};
    j["oracle"] = {{"num_samples", d.oracle.num_samples},
                   {"num_val", d.oracle.num_val},
                   {"removal_mode", d.oracle.removal_mode},
                   {"epsilon", d.oracle.epsilon},
                   {"parallelism", d.oracle.parallelism}};
    j["analysis"] = {{"sweep_lrs", d.analysis.sweep_lrs},
                     {"bin_width", d.analysis.bin_width},
                     {"smooth_window", d.analysis.smooth_window},
                     {"proxy_samples", d.analysis.proxy_samples},
                     {"proxy_per_step_norms", d.analysis.proxy_per_step_norms}};
    j["selection"] = {{"candidate_size", d.selection.candidate_size},
                      {"retain_size", d.selection.retain_size},
                      {"horizon", d.selection.horizon},
                      {"scorer", d.selection.scorer},
                      {"probe_size", d.selection.probe_size},
                      {"epochs", d.selection.epochs},
                      {"keep_ratio", d.selection.keep_ratio},
                      {"k_grid", d.selection.k_grid},
                      {"lr_grid", d.selection.lr_grid},
                      {"seeds", d.selection.seeds}};
    return j;
}

// "section.key=value" overrides applied onto the merged document.
void apply_override(json& doc, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw invalid_input_error("override must be path=value: " + spec);
    const std::string path = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);

    json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty())
        throw invalid_input_error("override has empty path: " + spec);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]))
            throw invalid_input_error("override path not found: " + path);
        node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->contains(leaf))
        throw invalid_input_error("override path not found: " + path);

    // Parse the value as JSON when possible (numbers, bools, arrays),
    // otherwise keep it as a string.
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    (*node)[leaf] = parsed;
}

template <typename T>
T get(const json& j, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw invalid_input_error("config field " + key + ": " + e.what());
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(
    const std::string& text, const std::vector<std::string>& overrides) {
    json user = json::parse(text, nullptr, false);
    if (user.is_discarded())
        throw invalid_input_error("config: not valid JSON");

    const json defaults = defaults_json();
    std::vector<std::string> offenders;
    check_unknown_keys(user, defaults, "", offenders);
    if (!offenders.empty()) {
        std::string all;
        for (const auto& o : offenders) all += (all.empty() ? "" : ", ") + o;
        throw invalid_input_error("config: unknown keys: " + all);
    }

    json merged = defaults;
    merged.merge_patch(user);
    for (const auto& o : overrides) apply_override(merged, o);

    ExperimentConfig cfg;
    cfg.seed = get<std::uint64_t>(merged, "seed");
    cfg.out_dir = get<std::string>(merged, "out_dir");
    const json& ds = merged.at("dataset");
    cfg.dataset.kind = get<std::string>(ds, "kind");
    cfg.dataset.n_train = get<std::uint32_t>(ds, "n_train");
    cfg.dataset.n_val = get<std::uint32_t>(ds, "n_val");
    cfg.dataset.n_test = get<std::uint32_t>(ds, "n_test");
    cfg.dataset.d = get<std::uint32_t>(ds, "d");
    cfg.dataset.classes = get<std::uint32_t>(ds, "classes");
    cfg.dataset.spread = get<double>(ds, "spread");
    cfg.dataset.label_noise = get<double>(ds, "label_noise");
    cfg.dataset.images = get<std::string>(ds, "images");
    cfg.dataset.labels = get<std::string>(ds, "labels");
    cfg.dataset.test_images = get<std::string>(ds, "test_images");
    cfg.dataset.test_labels = get<std::string>(ds, "test_labels");
    cfg.dataset.subset_fraction = get<double>(ds, "subset_fraction");
    cfg.dataset.subset_mode = get<std::string>(ds, "subset_mode");
    cfg.dataset.train_path = get<std::string>(ds, "train_path");
    cfg.dataset.val_path = get<std::string>(ds, "val_path");
    cfg.dataset.test_path = get<std::string>(ds, "test_path");
    const json& mo = merged.at("model");
    cfg.model.kind = get<std::string>(mo, "kind");
    cfg.model.hidden = get<std::vector<std::uint32_t>>(mo, "hidden");
    const json& op = merged.at("optimizer");
    cfg.optimizer.algo = get<std::string>(op, "algo");
    cfg.optimizer.lr = get<double>(op, "lr");
    cfg.optimizer.beta1 = get<double>(op, "beta1");
    cfg.optimizer.beta2 = get<double>(op, "beta2");
    cfg.optimizer.eps = get<double>(op, "eps");
    cfg.optimizer.weight_decay = get<double>(op, "weight_decay");
    cfg.optimizer.plain_sgd_mode = get<bool>(op, "plain_sgd_mode");
    cfg.optimizer.schedule = get<std::string>(op, "schedule");
    cfg.optimizer.warmup_steps = get<std::uint32_t>(op, "warmup_steps");
    const json& sc = merged.at("schedule");
    cfg.schedule.batch_size = get<std::uint32_t>(sc, "batch_size");
    cfg.schedule.epochs = get<std::uint32_t>(sc, "epochs");
    const json& mk = merged.at("mask");
    cfg.mask.keep_ratio = get<double>(mk, "keep_ratio");
    cfg.mask.ensemble = get<std::uint32_t>(mk, "ensemble");
    cfg.attribution.estimator =
        get<std::string>(merged.at("attribution"), "estimator");
    const json& orc = merged.at("oracle");
    cfg.oracle.num_samples = get<std::uint32_t>(orc, "num_samples");
    cfg.oracle.num_val = get<std::uint32_t>(orc, "num_val");
    cfg.oracle.removal_mode = get<std::string>(orc, "removal_mode");
    cfg.oracle.epsilon = get<double>(orc, "epsilon");
    cfg.oracle.parallelism = get<unsigned>(orc, "parallelism");
    const json& an = merged.at("analysis");
    cfg.analysis.sweep_lrs = get<std::vector<double>>(an, "sweep_lrs");
    cfg.analysis.bin_width = get<std::uint32_t>(an, "bin_width");
    cfg.analysis.smooth_window = get<std::uint32_t>(an, "smooth_window");
    cfg.analysis.proxy_samples = get<std::uint32_t>(an, "proxy_samples");
    cfg.analysis.proxy_per_step_norms =
        get<bool>(an, "proxy_per_step_norms");
    const json& se = merged.at("selection");
    cfg.selection.candidate_size = get<std::uint32_t>(se, "candidate_size");
    cfg.selection.retain_size = get<std::uint32_t>(se, "retain_size");
    cfg.selection.horizon = get<std::uint32_t>(se, "horizon");
    cfg.selection.scorer = get<std::string>(se, "scorer");
    cfg.selection.probe_size = get<std::uint32_t>(se, "probe_size");
    cfg.selection.epochs = get<std::uint32_t>(se, "epochs");
    cfg.selection.keep_ratio = get<double>(se, "keep_ratio");
    cfg.selection.k_grid = get<std::vector<std::uint32_t>>(se, "k_grid");
    cfg.selection.lr_grid = get<std::vector<double>>(se, "lr_grid");
    cfg.selection.seeds = get<std::uint32_t>(se, "seeds");

    // Cross-field validation.
    auto one_of = [](const std::string& field, const std::string& value,
                     std::initializer_list<const char*> allowed) {
        for (const char* a : allowed)
            if (value == a) return;
        std::string opts;
        for (const char* a : allowed) opts += std::string(a) + "|";
        throw invalid_input_error("config " + field + ": '" + value +
                                  "' not one of " + opts);
    };
    one_of("dataset.kind", cfg.dataset.kind, {"blobs", "idx", "file"});
    one_of("dataset.subset_mode", cfg.dataset.subset_mode, {"head", "random"});
    one_of("model.kind", cfg.model.kind, {"mlp", "logistic"});
    one_of("optimizer.algo", cfg.optimizer.algo, {"adamw", "sgd"});
    one_of("optimizer.schedule", cfg.optimizer.schedule,
           {"constant", "warmup_linear"});
    one_of("attribution.estimator", cfg.attribution.estimator,
           {"adamw", "sgd", "ensemble"});
    one_of("oracle.removal_mode", cfg.oracle.removal_mode,
           {"subtract", "renormalize"});
    one_of("selection.scorer", cfg.selection.scorer,
           {"adamw", "sgd", "random"});
    if (cfg.mask.keep_ratio <= 0.0 || cfg.mask.keep_ratio > 1.0)
        throw invalid_input_error("config mask.keep_ratio: must be in (0,1]");
    if (cfg.mask.ensemble == 0)
        throw invalid_input_error("config mask.ensemble: must be >= 1");
    if (cfg.optimizer.lr <= 0.0)
        throw invalid_input_error("config optimizer.lr: must be > 0");
    return cfg;
}

ExperimentConfig ExperimentConfig::load(
    const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw io_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str(), overrides);
}

std::string ExperimentConfig::canonical_json() const {
    json j = defaults_json();
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["dataset"]["kind"] = dataset.kind;
    j["dataset"]["n_train"] = dataset.n_train;
    j["dataset"]["n_val"] = dataset.n_val;
    j["dataset"]["n_test"] = dataset.n_test;
    j["dataset"]["d"] = dataset.d;
    j["dataset"]["classes"] = dataset.classes;
    j["dataset"]["spread"] = dataset.spread;
    j["dataset"]["label_noise"] = dataset.label_noise;
    j["dataset"]["images"] = dataset.images;
    j["dataset"]["labels"] = dataset.labels;
    j["dataset"]["test_images"] = dataset.test_images;
    j["dataset"]["test_labels"] = dataset.test_labels;
    j["dataset"]["subset_fraction"] = dataset.subset_fraction;
    j["dataset"]["subset_mode"] = dataset.subset_mode;
    j["dataset"]["train_path"] = dataset.train_path;
    j["dataset"]["val_path"] = dataset.val_path;
    j["dataset"]["test_path"] = dataset.test_path;
    j["model"]["kind"] = model.kind;
    j["model"]["hidden"] = model.hidden;
    j["optimizer"]["algo"] = optimizer.algo;
    j["optimizer"]["lr"] = optimizer.lr;
    j["optimizer"]["beta1"] = optimizer.beta1;
    j["optimizer"]["beta2"] = optimizer.beta2;
    j["optimizer"]["eps"] = optimizer.eps;
    j["optimizer"]["weight_decay"] = optimizer.weight_decay;
    j["optimizer"]["plain_sgd_mode"] = optimizer.plain_sgd_mode;
    j["optimizer"]["schedule"] = optimizer.schedule;
    j["optimizer"]["warmup_steps"] = optimizer.warmup_steps;
    j["schedule"]["batch_size"] = schedule.batch_size;
    j["schedule"]["epochs"] = schedule.epochs;
    j["mask"]["keep_ratio"] = mask.keep_ratio;
    j["mask"]["ensemble"] = mask.ensemble;
    j["attribution"]["estimator"] = attribution.estimator;
    j["oracle"]["num_samples"] = oracle.num_samples;
    j["oracle"]["num_val"] = oracle.num_val;
    j["oracle"]["removal_mode"] = oracle.removal_mode;
    j["oracle"]["epsilon"] = oracle.epsilon;
    j["oracle"]["parallelism"] = oracle.parallelism;
    j["analysis"]["sweep_lrs"] = analysis.sweep_lrs;
    j["analysis"]["bin_width"] = analysis.bin_width;
    j["analysis"]["smooth_window"] = analysis.smooth_window;
    j["analysis"]["proxy_samples"] = analysis.proxy_samples;
    j["analysis"]["proxy_per_step_norms"] = analysis.proxy_per_step_norms;
    j["selection"]["candidate_size"] = selection.candidate_size;
    j["selection"]["retain_size"] = selection.retain_size;
    j["selection"]["horizon"] = selection.horizon;
    j["selection"]["scorer"] = selection.scorer;
    j["selection"]["probe_size"] = selection.probe_size;
    j["selection"]["epochs"] = selection.epochs;
    j["selection"]["keep_ratio"] = selection.keep_ratio;
    j["selection"]["k_grid"] = selection.k_grid;
    j["selection"]["lr_grid"] = selection.lr_grid;
    j["selection"]["seeds"] = selection.seeds;
    return j.dump();  // nlohmann objects keep sorted key order
}

std::uint64_t ExperimentConfig::digest() const {
    return fnv1a64(canonical_json());
}

void ExperimentConfig::write_resolved(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("config: cannot write " + path);
    const json j = json::parse(canonical_json());
    out << j.dump(2) << "\n";
}

ModelSpec ExperimentConfig::model_spec(std::uint32_t input_dim,
                                       std::uint32_t num_classes) const {
    ModelSpec spec;
    spec.kind = model.kind == "mlp" ? ModelKind::mlp : ModelKind::logistic;
    spec.layer_dims.push_back(input_dim);
    if (spec.kind == ModelKind::mlp)
        for (auto h : model.hidden) spec.layer_dims.push_back(h);
    spec.layer_dims.push_back(num_classes);
    spec.init_seed = root_stream().derive("init").stream_id ^ seed;
    return spec;
}

OptimConfig ExperimentConfig::optim_config(std::uint32_t total_steps) const {
    OptimConfig cfg;
    cfg.algo = optimizer.algo == "adamw" ? OptimAlgo::adamw : OptimAlgo::sgd;
    cfg.beta1 = optimizer.beta1;
    cfg.beta2 = optimizer.beta2;
    cfg.eps = optimizer.eps;
    cfg.weight_decay = optimizer.weight_decay;
    cfg.plain_sgd_mode = optimizer.plain_sgd_mode;
    cfg.schedule.kind = optimizer.schedule == "constant"
                            ? LrKind::constant
                            : LrKind::linear_warmup_then_linear_decay;
    cfg.schedule.base_lr = optimizer.lr;
    cfg.schedule.warmup_steps = optimizer.warmup_steps;
    cfg.schedule.total_steps = total_steps;
    return cfg;
}

Estimator ExperimentConfig::estimator() const {
    return attribution.estimator == "sgd" ? Estimator::sgd : Estimator::adamw;
}

RemovalMode ExperimentConfig::removal_mode() const {
    return oracle.removal_mode == "renormalize" ? RemovalMode::renormalize
                                                : RemovalMode::subtract;
}

Scorer ExperimentConfig::scorer() const {
    if (selection.scorer == "sgd") return Scorer::sgd;
    if (selection.scorer == "random") return Scorer::random_baseline;
    return Scorer::adamw;
}

LoadedData load_data(const ExperimentConfig& cfg) {
    LoadedData out;
    const RngStream root = cfg.root_stream();
    if (cfg.dataset.kind == "blobs") {
        const std::uint32_t total =
            cfg.dataset.n_train + cfg.dataset.n_val + cfg.dataset.n_test;
        const Dataset all =
            gen_blobs(total, cfg.dataset.d, cfg.dataset.classes,
                      cfg.dataset.spread, root.derive("data"));
        out.train = all.slice(0, cfg.dataset.n_train);
        out.val = all.slice(cfg.dataset.n_train, cfg.dataset.n_val);
        out.test = all.slice(cfg.dataset.n_train + cfg.dataset.n_val,
                             cfg.dataset.n_test);
        if (cfg.dataset.label_noise > 0.0)
            out.noisy_ids = flip_labels(out.train, cfg.dataset.label_noise,
                                        root.derive("noise"));
    } else if (cfg.dataset.kind == "idx") {
        Dataset full = load_idx(cfg.dataset.images, cfg.dataset.labels);
        const auto subset = static_cast<std::uint32_t>(
            cfg.dataset.subset_fraction * full.n);
        Dataset train_pool;
        if (cfg.dataset.subset_mode == "head") {
            train_pool = full.slice(0, subset);
        } else {
            RngCursor rng(root.derive("subset"));
            const auto picks = sample_without_replacement(full.n, subset, rng);
            train_pool.n = subset;
            train_pool.d = full.d;
            train_pool.num_classes = full.num_classes;
            for (std::uint32_t id : picks) {
                const auto row = full.row(id);
                train_pool.features.insert(train_pool.features.end(),
                                           row.begin(), row.end());
                train_pool.labels.push_back(full.labels[id]);
            }
        }
        out.train = std::move(train_pool);
        Dataset held = load_idx(cfg.dataset.test_images,
                                cfg.dataset.test_labels);
        const std::uint32_t nv = std::min(cfg.dataset.n_val, held.n / 2);
        out.val = held.slice(0, nv);
        out.test = held.slice(nv, std::min(cfg.dataset.n_test, held.n - nv));
        if (cfg.dataset.label_noise > 0.0)
            out.noisy_ids = flip_labels(out.train, cfg.dataset.label_noise,
                                        root.derive("noise"));
    } else {  // file
        out.train = load_dataset(cfg.dataset.train_path);
        out.val = load_dataset(cfg.dataset.val_path);
        out.test = load_dataset(cfg.dataset.test_path);
    }
    return out;
}

}  // namespace trajattr
