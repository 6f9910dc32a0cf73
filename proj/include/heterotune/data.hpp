#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "heterotune/common.hpp"
#include "heterotune/matrix.hpp"
#include "heterotune/rng.hpp"

namespace heterotune {

struct Dataset {
    Matrix features;          // n x d
    std::vector<int> labels;  // length n, values in [0, num_classes)
    int num_classes = 0;

    int size() const { return static_cast<int>(labels.size()); }
};

inline void validate_dataset(const Dataset& d, const std::string& what) {
    if (d.labels.empty()) throw DataError(what + ": empty dataset");
    if (d.features.rows != d.size())
        throw DataError(what + ": " + std::to_string(d.features.rows) + " feature rows vs " +
                        std::to_string(d.size()) + " labels");
    for (int i = 0; i < d.size(); ++i)
        if (d.labels[i] < 0 || d.labels[i] >= d.num_classes)
            throw DataError(what + ": label " + std::to_string(d.labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(d.num_classes) +
                            ")");
    ensure_finite(d.features, what.c_str());
}

/// Rows of `d` selected in the order given by `indices`.
inline Dataset subset(const Dataset& d, const std::vector<int>& indices) {
    Dataset out;
    out.num_classes = d.num_classes;
    out.features = Matrix(static_cast<int>(indices.size()), d.features.cols);
    out.labels.reserve(indices.size());
    for (int i = 0; i < static_cast<int>(indices.size()); ++i) {
        const int src = indices[i];
        if (src < 0 || src >= d.size())
            throw DataError("subset: index " + std::to_string(src) + " outside dataset of " +
                            std::to_string(d.size()));
        for (int j = 0; j < d.features.cols; ++j) out.features(i, j) = d.features(src, j);
        out.labels.push_back(d.labels[src]);
    }
    return out;
}

/// Gaussian blobs: class means uniform in [-1,1]^d, per-coordinate noise with
/// standard deviation `spread`, rows shuffled. Draw order (means, then samples
/// class by class, then the shuffle) is part of the determinism contract.
inline Dataset gen_blobs(int num_classes, int dims, int n_per_class, double spread,
                         SeededRng& rng) {
    if (num_classes < 2) throw ConfigError("gen_blobs: need at least 2 classes");
    if (dims < 2) throw ConfigError("gen_blobs: need at least 2 dims");
    if (n_per_class < 1) throw ConfigError("gen_blobs: need at least 1 sample per class");
    if (spread < 0.0) throw ConfigError("gen_blobs: negative spread");

    Matrix means(num_classes, dims);
    for (double& v : means.data) v = rng.uniform(-1.0, 1.0);

    const int n = num_classes * n_per_class;
    Dataset d;
    d.num_classes = num_classes;
    d.features = Matrix(n, dims);
    d.labels.resize(n);
    int row = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int s = 0; s < n_per_class; ++s, ++row) {
            for (int j = 0; j < dims; ++j)
                d.features(row, j) = means(c, j) + rng.normal(0.0, spread);
            d.labels[row] = c;
        }
    }

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    return subset(d, perm);
}

/// Per-class split: each class contributes round(val_fraction * count) rows to
/// the validation half, chosen by an rng-driven shuffle of that class.
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& d, double val_fraction,
                                                    SeededRng& rng) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("stratified_split: val_fraction " + std::to_string(val_fraction) +
                          " outside [0, 1)");
    std::vector<std::vector<int>> by_class(d.num_classes);
    for (int i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);

    std::vector<int> train_idx, val_idx;
    for (int c = 0; c < d.num_classes; ++c) {
        auto& idx = by_class[c];
        rng.shuffle(idx);
        const int n_val = static_cast<int>(
            std::llround(val_fraction * static_cast<double>(idx.size())));
        for (int i = 0; i < static_cast<int>(idx.size()); ++i)
            (i < n_val ? val_idx : train_idx).push_back(idx[i]);
    }
    if (train_idx.empty()) throw DataError("stratified_split: empty training half");
    return {subset(d, train_idx), subset(d, val_idx)};
}

// ---------------------------------------------------------------------------
// IDX format: big-endian headers, one byte per pixel/label.
//   images: u32 magic 0x00000803, u32 count, u32 rows, u32 cols, pixels
//   labels: u32 magic 0x00000801, u32 count, labels
// ---------------------------------------------------------------------------

namespace detail {

constexpr uint32_t kIdxImagesMagic = 0x00000803u;
constexpr uint32_t kIdxLabelsMagic = 0x00000801u;

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>());
}

inline uint32_t read_u32_be(const std::vector<uint8_t>& b, size_t offset, const std::string& path) {
    if (offset + 4 > b.size())
        throw DataError(path + ": truncated at byte " + std::to_string(b.size()) + ", header needs " +
                        std::to_string(offset + 4));
    return (static_cast<uint32_t>(b[offset]) << 24) | (static_cast<uint32_t>(b[offset + 1]) << 16) |
           (static_cast<uint32_t>(b[offset + 2]) << 8) | static_cast<uint32_t>(b[offset + 3]);
}

inline void write_u32_be(std::ofstream& out, uint32_t v) {
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                           static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(bytes, 4);
}

}  // namespace detail

/// Pixels land in [0,1] as value/255. num_classes of the result is
/// max(label)+1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = detail::read_file_bytes(images_path);
    const uint32_t img_magic = detail::read_u32_be(img, 0, images_path);
    if (img_magic != detail::kIdxImagesMagic)
        throw DataError(images_path + ": bad magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%08x", img_magic);
            return std::string(buf);
        }() + " at byte 0, want 0x00000803");
    const uint32_t n = detail::read_u32_be(img, 4, images_path);
    const uint32_t rows = detail::read_u32_be(img, 8, images_path);
    const uint32_t cols = detail::read_u32_be(img, 12, images_path);
    const size_t want_img = 16 + static_cast<size_t>(n) * rows * cols;
    if (img.size() != want_img)
        throw DataError(images_path + ": expected " + std::to_string(want_img) + " bytes, file has " +
                        std::to_string(img.size()));

    const auto lab = detail::read_file_bytes(labels_path);
    const uint32_t lab_magic = detail::read_u32_be(lab, 0, labels_path);
    if (lab_magic != detail::kIdxLabelsMagic)
        throw DataError(labels_path + ": bad magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%08x", lab_magic);
            return std::string(buf);
        }() + " at byte 0, want 0x00000801");
    const uint32_t n_lab = detail::read_u32_be(lab, 4, labels_path);
    if (n_lab != n)
        throw DataError(labels_path + ": " + std::to_string(n_lab) + " labels vs " +
                        std::to_string(n) + " images");
    const size_t want_lab = 8 + static_cast<size_t>(n_lab);
    if (lab.size() != want_lab)
        throw DataError(labels_path + ": expected " + std::to_string(want_lab) +
                        " bytes, file has " + std::to_string(lab.size()));
    if (n == 0) throw DataError(images_path + ": zero images");

    Dataset d;
    d.features = Matrix(static_cast<int>(n), static_cast<int>(rows * cols));
    d.labels.resize(n);
    for (size_t i = 0; i < d.features.data.size(); ++i)
        d.features.data[i] = static_cast<double>(img[16 + i]) / 255.0;
    int max_label = 0;
    for (uint32_t i = 0; i < n; ++i) {
        d.labels[i] = static_cast<int>(lab[8 + i]);
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = max_label + 1;
    return d;
}

/// Writer counterpart over raw bytes, used for fixtures and round trips.
inline void save_idx(const std::string& images_path, const std::string& labels_path, uint32_t n,
                     uint32_t rows, uint32_t cols, const std::vector<uint8_t>& pixels,
                     const std::vector<uint8_t>& labels) {
    if (pixels.size() != static_cast<size_t>(n) * rows * cols)
        throw DataError("save_idx: " + std::to_string(pixels.size()) + " pixel bytes, want " +
                        std::to_string(static_cast<size_t>(n) * rows * cols));
    if (labels.size() != n)
        throw DataError("save_idx: " + std::to_string(labels.size()) + " labels, want " +
                        std::to_string(n));
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw DataError("cannot write " + images_path);
    detail::write_u32_be(img, detail::kIdxImagesMagic);
    detail::write_u32_be(img, n);
    detail::write_u32_be(img, rows);
    detail::write_u32_be(img, cols);
    img.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!img) throw DataError("short write to " + images_path);

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw DataError("cannot write " + labels_path);
    detail::write_u32_be(lab, detail::kIdxLabelsMagic);
    detail::write_u32_be(lab, n);
    lab.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
    if (!lab) throw DataError("short write to " + labels_path);
}

}  // namespace heterotune
