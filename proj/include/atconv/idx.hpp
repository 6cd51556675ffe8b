#pragma once

// Big-endian IDX image/label files (the MNIST distribution format).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "atconv/error.hpp"

namespace atconv {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxDataset {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> images; // count x rows x cols, scaled to [0, 1]
    std::vector<std::uint8_t> labels;

    std::size_t image_size() const { return rows * cols; }
    const float* image(std::size_t i) const { return images.data() + i * image_size(); }
};

namespace detail {

inline std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset, const std::string& path) {
    if (buf.size() < offset + 4) {
        throw IoError("'" + path + "' is truncated in its header");
    }
    return (std::uint32_t(buf[offset]) << 24) | (std::uint32_t(buf[offset + 1]) << 16) |
           (std::uint32_t(buf[offset + 2]) << 8) | std::uint32_t(buf[offset + 3]);
}

inline void check_magic(std::uint32_t magic, std::uint32_t expected, const std::string& path) {
    if (magic != expected) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x)", magic, expected);
        throw FormatError("'" + path + "': " + buf);
    }
}

} // namespace detail

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

/// Raw bytes of an IDX image file holding `count` images of rows x cols.
inline std::vector<std::uint8_t> encode_idx_images(const std::vector<std::uint8_t>& pixels, std::uint32_t count,
                                                   std::uint32_t rows, std::uint32_t cols) {
    std::vector<std::uint8_t> out;
    append_be32(out, kIdxImagesMagic);
    append_be32(out, count);
    append_be32(out, rows);
    append_be32(out, cols);
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    append_be32(out, kIdxLabelsMagic);
    append_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

inline IdxDataset load_idx(const std::string& images_path, const std::string& labels_path,
                           std::size_t num_classes = 10) {
    const auto img = detail::read_all(images_path);
    const auto lab = detail::read_all(labels_path);
    if (img.empty()) throw IoError("'" + images_path + "' is empty");
    if (lab.empty()) throw IoError("'" + labels_path + "' is empty");

    detail::check_magic(detail::read_be32(img, 0, images_path), kIdxImagesMagic, images_path);
    detail::check_magic(detail::read_be32(lab, 0, labels_path), kIdxLabelsMagic, labels_path);

    IdxDataset ds;
    ds.count = detail::read_be32(img, 4, images_path);
    ds.rows = detail::read_be32(img, 8, images_path);
    ds.cols = detail::read_be32(img, 12, images_path);
    const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
    if (n_labels != ds.count) {
        throw ConsistencyError(std::to_string(ds.count) + " images but " + std::to_string(n_labels) + " labels");
    }
    const std::size_t payload = ds.count * ds.rows * ds.cols;
    if (img.size() < 16 + payload) {
        throw IoError("'" + images_path + "' is truncated: expected " + std::to_string(payload) + " pixel bytes");
    }
    if (lab.size() < 8 + n_labels) {
        throw IoError("'" + labels_path + "' is truncated: expected " + std::to_string(n_labels) + " labels");
    }
    ds.images.resize(payload);
    for (std::size_t i = 0; i < payload; ++i) ds.images[i] = float(img[16 + i]) / 255.0f;
    ds.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n_labels));
    for (auto l : ds.labels) {
        if (l >= num_classes) {
            throw ConsistencyError("label " + std::to_string(l) + " out of range for " + std::to_string(num_classes) +
                                   " classes");
        }
    }
    return ds;
}

} // namespace atconv
