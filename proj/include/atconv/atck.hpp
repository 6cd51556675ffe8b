#pragma once

// ATCK tensor container:
//   "ATCK" | u32 version (=1) | u32 header length | UTF-8 JSON header | payloads
// The header is {"entries": [{"name", "dtype", "shape"}, ...]} and payloads
// follow in header order as raw little-endian f32/f64 values.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "atconv/error.hpp"
#include "atconv/tensor.hpp"

namespace atconv {

enum class DType { f32, f64 };

inline std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(const std::string& s) {
    if (s == "f32") {
        return DType::f32;
    }
    if (s == "f64") {
        return DType::f64;
    }
    throw FormatError("ATCK: unknown dtype '" + s + "'");
}

inline std::size_t dtype_bytes(DType d) { return d == DType::f32 ? 4 : 8; }

struct AtckEntry {
    std::string name;
    DType dtype = DType::f64;
    std::vector<std::size_t> shape;
    std::vector<double> values;

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
};

inline constexpr std::array<char, 4> kAtckMagic = {'A', 'T', 'C', 'K'};
inline constexpr std::uint32_t kAtckVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                   static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4)) {
        throw IoError("ATCK: truncated header");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <class U, class Bits>
void put_le(std::ostream& os, U value) {
    auto bits = std::bit_cast<Bits>(value);
    std::array<char, sizeof(Bits)> b{};
    for (std::size_t i = 0; i < sizeof(Bits); ++i) {
        b[i] = static_cast<char>(bits & 0xff);
        bits >>= 8;
    }
    os.write(b.data(), b.size());
}

template <class U, class Bits>
U get_le(const unsigned char* p) {
    Bits bits = 0;
    for (std::size_t i = sizeof(Bits); i-- > 0;) {
        bits = (bits << 8) | p[i];
    }
    return std::bit_cast<U>(bits);
}

} // namespace detail

inline void write_atck(std::ostream& os, const std::vector<AtckEntry>& entries) {
    nlohmann::json header;
    header["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
        if (e.values.size() != e.numel()) {
            throw DimensionError("ATCK: entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                                 " values for its shape");
        }
        header["entries"].push_back({{"name", e.name}, {"dtype", dtype_name(e.dtype)}, {"shape", e.shape}});
    }
    const std::string text = header.dump();
    os.write(kAtckMagic.data(), kAtckMagic.size());
    detail::put_u32(os, kAtckVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries) {
        for (const double v : e.values) {
            if (e.dtype == DType::f32) {
                detail::put_le<float, std::uint32_t>(os, static_cast<float>(v));
            } else {
                detail::put_le<double, std::uint64_t>(os, v);
            }
        }
    }
    if (!os) {
        throw IoError("ATCK: write failed");
    }
}

inline std::vector<AtckEntry> read_atck(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), magic.size())) {
        throw IoError("ATCK: file too short for magic");
    }
    if (magic != kAtckMagic) {
        throw FormatError("ATCK: bad magic");
    }
    const std::uint32_t version = detail::get_u32(is);
    if (version != kAtckVersion) {
        throw FormatError("ATCK: unsupported version " + std::to_string(version));
    }
    const std::uint32_t header_len = detail::get_u32(is);
    std::string text(header_len, '\0');
    if (!is.read(text.data(), header_len)) {
        throw IoError("ATCK: truncated JSON header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(std::string("ATCK: malformed header: ") + ex.what());
    }
    if (!header.contains("entries") || !header["entries"].is_array()) {
        throw FormatError("ATCK: header has no entries array");
    }
    std::vector<AtckEntry> out;
    for (const auto& je : header["entries"]) {
        AtckEntry e;
        try {
            e.name = je.at("name").get<std::string>();
            e.dtype = parse_dtype(je.at("dtype").get<std::string>());
            e.shape = je.at("shape").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError(std::string("ATCK: bad entry: ") + ex.what());
        }
        const std::size_t n = e.numel();
        const std::size_t width = dtype_bytes(e.dtype);
        std::vector<unsigned char> raw(n * width);
        if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
            throw IoError("ATCK: truncated payload for '" + e.name + "'");
        }
        e.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            e.values[i] = e.dtype == DType::f32 ? detail::get_le<float, std::uint32_t>(raw.data() + 4 * i)
                                                : detail::get_le<double, std::uint64_t>(raw.data() + 8 * i);
        }
        out.push_back(std::move(e));
    }
    return out;
}

inline void write_atck_file(const std::string& path, const std::vector<AtckEntry>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("ATCK: cannot open '" + path + "' for writing");
    }
    write_atck(os, entries);
}

inline std::vector<AtckEntry> read_atck_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("ATCK: cannot open '" + path + "'");
    }
    return read_atck(is);
}

inline const AtckEntry& find_entry(const std::vector<AtckEntry>& entries, const std::string& name) {
    for (const auto& e : entries) {
        if (e.name == name) {
            return e;
        }
    }
    throw FormatError("ATCK: missing entry '" + name + "'");
}

template <class T>
AtckEntry make_entry(std::string name, std::vector<std::size_t> shape, const std::vector<T>& values) {
    AtckEntry e;
    e.name = std::move(name);
    e.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    e.shape = std::move(shape);
    e.values.assign(values.begin(), values.end());
    return e;
}

template <class T>
AtckEntry make_entry(std::string name, const Matrix<T>& m) {
    return make_entry(std::move(name), {m.rows(), m.cols()}, m.data());
}

template <class T>
AtckEntry make_entry(std::string name, const Tensor4<T>& t) {
    const auto& s = t.shape();
    return make_entry(std::move(name), {s.b, s.c, s.h, s.w}, t.data());
}

template <class T>
std::vector<T> entry_values(const AtckEntry& e, std::size_t expected) {
    if (e.values.size() != expected) {
        throw DimensionError("ATCK: entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                             " values, expected " + std::to_string(expected));
    }
    return std::vector<T>(e.values.begin(), e.values.end());
}

} // namespace atconv
