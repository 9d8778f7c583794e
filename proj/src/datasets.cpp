// SPDX-License-Identifier: Apache-2.0
#include "trajattr/datasets.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <numeric>

#include "trajattr/errors.hpp"

namespace trajattr {

Dataset Dataset::slice(std::uint32_t begin, std::uint32_t count) const {
    if (begin + count > n)
        throw invalid_input_error("Dataset::slice: range out of bounds");
    Dataset out;
    out.n = count;
    out.d = d;
    out.num_classes = num_classes;
    out.features.assign(
        features.begin() + static_cast<std::size_t>(begin) * d,
        features.begin() + static_cast<std::size_t>(begin + count) * d);
    out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
    return out;
}

Dataset gen_blobs(std::uint32_t n, std::uint32_t d, std::uint32_t classes,
                  double spread, RngStream rng) {
    if (classes == 0 || d == 0 || n < classes)
        throw invalid_input_error("gen_blobs: need n >= classes >= 1, d >= 1");
    if (spread < 0.0)
        throw invalid_input_error("gen_blobs: spread must be >= 0");

    Dataset data;
    data.n = n;
    data.d = d;
    data.num_classes = classes;
    data.features.resize(static_cast<std::size_t>(n) * d);
    data.labels.resize(n);

    // Centers once from the seed; candidates closer than a minimum
    // separation to an accepted center are redrawn (bounded, deterministic)
    // so clusters stay distinguishable at moderate spread.
    RngCursor centers_rng(rng.derive("centers"));
    Vec centers(static_cast<std::size_t>(classes) * d);
    const double min_sep = 3.0;
    for (std::uint32_t c = 0; c < classes; ++c) {
        double* cur = centers.data() + static_cast<std::size_t>(c) * d;
        for (int attempt = 0; attempt < 64; ++attempt) {
            for (std::uint32_t j = 0; j < d; ++j)
                cur[j] = 2.0 * centers_rng.normal();
            bool ok = true;
            for (std::uint32_t prev = 0; prev < c && ok; ++prev) {
                const double* other =
                    centers.data() + static_cast<std::size_t>(prev) * d;
                double dist2 = 0.0;
                for (std::uint32_t j = 0; j < d; ++j)
                    dist2 += (cur[j] - other[j]) * (cur[j] - other[j]);
                ok = dist2 >= min_sep * min_sep;
            }
            if (ok) break;
        }
    }

    RngCursor point_rng(rng.derive("points"));
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t y = i % classes;
        data.labels[i] = y;
        double* row = data.features.data() + static_cast<std::size_t>(i) * d;
        const double* c = centers.data() + static_cast<std::size_t>(y) * d;
        for (std::uint32_t j = 0; j < d; ++j)
            row[j] = c[j] + spread * point_rng.normal();
    }
    return data;
}

namespace {

std::uint32_t read_be32(std::istream& in, const char* field) {
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in)
        throw format_error(std::string("idx: truncated header at ") + field);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw io_error("idx: cannot open " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw io_error("idx: cannot open " + labels_path);

    const std::uint32_t img_magic = read_be32(img, "images magic");
    if (img_magic != 0x00000803u)
        throw format_error("idx: bad images magic (expected 0x00000803)");
    const std::uint32_t n_img = read_be32(img, "images count");
    const std::uint32_t rows = read_be32(img, "images rows");
    const std::uint32_t cols = read_be32(img, "images cols");

    const std::uint32_t lab_magic = read_be32(lab, "labels magic");
    if (lab_magic != 0x00000801u)
        throw format_error("idx: bad labels magic (expected 0x00000801)");
    const std::uint32_t n_lab = read_be32(lab, "labels count");

    if (n_img != n_lab)
        throw format_error("idx: count mismatch between images (" +
                           std::to_string(n_img) + ") and labels (" +
                           std::to_string(n_lab) + ")");

    Dataset data;
    data.n = n_img;
    data.d = rows * cols;
    data.features.resize(static_cast<std::size_t>(data.n) * data.d);
    data.labels.resize(data.n);

    std::vector<unsigned char> buf(data.d);
    for (std::uint32_t i = 0; i < data.n; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), data.d);
        if (!img)
            throw format_error("idx: truncated images payload at record " +
                               std::to_string(i));
        double* row = data.features.data() + static_cast<std::size_t>(i) * data.d;
        for (std::uint32_t j = 0; j < data.d; ++j)
            row[j] = static_cast<double>(buf[j]) / 255.0;
    }
    std::uint32_t max_label = 0;
    for (std::uint32_t i = 0; i < data.n; ++i) {
        unsigned char y = 0;
        lab.read(reinterpret_cast<char*>(&y), 1);
        if (!lab)
            throw format_error("idx: truncated labels payload at record " +
                               std::to_string(i));
        data.labels[i] = y;
        max_label = std::max<std::uint32_t>(max_label, y);
    }
    data.num_classes = max_label + 1;
    return data;
}

BatchSchedule make_schedule(std::uint32_t n, std::uint32_t batch_size,
                            std::uint32_t epochs, RngStream rng) {
    if (batch_size == 0 || batch_size > n)
        throw invalid_input_error(
            "make_schedule: need 1 <= batch_size <= n");
    BatchSchedule sched;
    sched.batch_size = batch_size;
    sched.epochs = epochs;
    sched.shuffle_seed = rng.seed;

    const std::uint32_t steps_per_epoch = n / batch_size;
    sched.steps.reserve(static_cast<std::size_t>(steps_per_epoch) * epochs);
    std::vector<std::uint32_t> ids(n);
    for (std::uint32_t e = 0; e < epochs; ++e) {
        std::iota(ids.begin(), ids.end(), 0u);
        RngCursor epoch_rng(rng.derive("epoch", e));
        shuffle(ids, epoch_rng);
        for (std::uint32_t s = 0; s < steps_per_epoch; ++s) {
            sched.steps.emplace_back(
                ids.begin() + static_cast<std::size_t>(s) * batch_size,
                ids.begin() + static_cast<std::size_t>(s + 1) * batch_size);
        }
    }
    return sched;
}

std::vector<std::uint32_t> flip_labels(Dataset& data, double fraction,
                                       RngStream rng) {
    if (fraction < 0.0 || fraction > 1.0)
        throw invalid_input_error("flip_labels: fraction must be in [0,1]");
    if (data.num_classes < 2 || fraction == 0.0) return {};
    const auto k = static_cast<std::uint32_t>(fraction * data.n + 0.5);
    RngCursor rc(rng.derive("flip-pick"));
    auto ids = sample_without_replacement(data.n, k, rc);
    RngCursor lc(rng.derive("flip-label"));
    for (std::uint32_t id : ids) {
        const auto shift = 1 + static_cast<std::uint32_t>(
                                   lc.below(data.num_classes - 1));
        data.labels[id] = (data.labels[id] + shift) % data.num_classes;
    }
    return ids;
}

namespace {
constexpr std::uint32_t kDatasetMagic = 0x54414454u;  // "TDAT"
}

void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("save_dataset: cannot open " + path);
    out.write(reinterpret_cast<const char*>(&kDatasetMagic), 4);
    out.write(reinterpret_cast<const char*>(&data.n), 4);
    out.write(reinterpret_cast<const char*>(&data.d), 4);
    out.write(reinterpret_cast<const char*>(&data.num_classes), 4);
    out.write(reinterpret_cast<const char*>(data.features.data()),
              static_cast<std::streamsize>(data.features.size() * 8));
    out.write(reinterpret_cast<const char*>(data.labels.data()),
              static_cast<std::streamsize>(data.labels.size() * 4));
    if (!out) throw io_error("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("load_dataset: cannot open " + path);
    std::uint32_t magic = 0;
    Dataset data;
    in.read(reinterpret_cast<char*>(&magic), 4);
    if (!in || magic != kDatasetMagic)
        throw format_error("load_dataset: bad magic in " + path);
    in.read(reinterpret_cast<char*>(&data.n), 4);
    in.read(reinterpret_cast<char*>(&data.d), 4);
    in.read(reinterpret_cast<char*>(&data.num_classes), 4);
    if (!in) throw format_error("load_dataset: truncated header in " + path);
    data.features.resize(static_cast<std::size_t>(data.n) * data.d);
    data.labels.resize(data.n);
    in.read(reinterpret_cast<char*>(data.features.data()),
            static_cast<std::streamsize>(data.features.size() * 8));
    in.read(reinterpret_cast<char*>(data.labels.data()),
            static_cast<std::streamsize>(data.labels.size() * 4));
    if (!in) throw format_error("load_dataset: truncated payload in " + path);
    return data;
}

}  // namespace trajattr
