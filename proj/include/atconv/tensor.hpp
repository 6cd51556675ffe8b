#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "atconv/error.hpp"
#include "atconv/rng.hpp"

namespace atconv {

template <class T>
using Vector = std::vector<T>;

/// Read-only span parameter that does not take part in template argument deduction.
template <class T>
using CSpan = std::type_identity_t<std::span<const T>>;

struct Shape4 {
    std::size_t b = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t numel() const { return b * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

    std::string str() const {
        return "(" + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

/// Dense (B, C, H, W) activation tensor, row-major with W fastest.
template <class T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor4(std::size_t b, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
        : Tensor4(Shape4{b, c, h, w}, fill) {}
    Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel()) {
            throw DimensionError("Tensor4: buffer of " + std::to_string(data_.size()) +
                                 " elements does not match shape " + shape_.str());
        }
    }

    const Shape4& shape() const { return shape_; }
    std::size_t batch() const { return shape_.b; }
    std::size_t channels() const { return shape_.c; }
    std::size_t height() const { return shape_.h; }
    std::size_t width() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return ((b * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    T& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) { return data_[index(b, c, h, w)]; }
    const T& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[index(b, c, h, w)];
    }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Contiguous H*W plane of one (b, c) pair.
    std::span<T> plane(std::size_t b, std::size_t c) {
        return {data_.data() + index(b, c, 0, 0), shape_.plane()};
    }
    std::span<const T> plane(std::size_t b, std::size_t c) const {
        return {data_.data() + index(b, c, 0, 0), shape_.plane()};
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor4<U> cast() const {
        Tensor4<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

/// Row-major dense matrix used for projection weights.
template <class T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("Matrix: buffer size does not match " + std::to_string(rows_) + "x" +
                                 std::to_string(cols_));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = T(1);
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/// Throws NumericError naming `where` if any element is NaN or infinite.
template <class T>
void ensure_finite(std::span<const T> values, std::string_view where) {
    for (const T v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(where) + ": non-finite value produced");
        }
    }
}

template <class T>
void ensure_finite(const Tensor4<T>& t, std::string_view where) {
    ensure_finite(std::span<const T>(t.data()), where);
}

template <class T>
Tensor4<T> random_tensor(Shape4 shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4<T> t(shape);
    for (auto& v : t.data()) {
        v = static_cast<T>(rng.uniform(lo, hi));
    }
    return t;
}

template <class T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.data()) {
        v = static_cast<T>(rng.uniform(lo, hi));
    }
    return m;
}

template <class T>
Vector<T> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Vector<T> v(n);
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform(lo, hi));
    }
    return v;
}

/// Largest absolute elementwise difference. Sizes must agree.
template <class T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) {
        throw DimensionError("max_abs_diff: size mismatch");
    }
    T m = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

template <class T>
T max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff: shape " + a.shape().str() + " vs " + b.shape().str());
    }
    return max_abs_diff(std::span<const T>(a.data()), std::span<const T>(b.data()));
}

template <class T>
T max_abs(std::span<const T> a) {
    T m = T(0);
    for (const T v : a) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

} // namespace atconv
