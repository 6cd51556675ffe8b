#pragma once

// Forward primitives used by the ATConv pipeline, each paired with a
// hand-derived backward that consumes an explicit forward cache.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "atconv/error.hpp"
#include "atconv/tensor.hpp"

namespace atconv {

// ---------------------------------------------------------------------------
// Operation counter

namespace detail {
inline thread_local std::uint64_t flop_count = 0;
inline thread_local bool flop_counting = false;
} // namespace detail

inline void count_flops(std::uint64_t n) {
    if (detail::flop_counting) {
        detail::flop_count += n;
    }
}

/// Counts FLOPs (multiply-add = 2) issued by primitives on this thread while alive.
class FlopScope {
public:
    FlopScope() : saved_count_(detail::flop_count), saved_enabled_(detail::flop_counting) {
        detail::flop_count = 0;
        detail::flop_counting = true;
    }
    ~FlopScope() {
        detail::flop_count = saved_count_;
        detail::flop_counting = saved_enabled_;
    }
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;

    std::uint64_t count() const { return detail::flop_count; }

private:
    std::uint64_t saved_count_;
    bool saved_enabled_;
};

// ---------------------------------------------------------------------------
// Scalar functions

/// erf(x) in the Abramowitz-Stegun 7.1.26 form, erf = 1 - t*P(t)*exp(-x^2) with
/// t = 1/(1 + 0.3275911|x|). P is a degree-9 least-squares refit of the original
/// five-term polynomial; max abs error 2.1e-11 over the real line.
inline double erf_approx(double x) {
    constexpr double p = 0.3275911;
    constexpr std::array<double, 9> a = {
        0.19125599486916681,  0.1100236346101271,  0.55773543074002796,
        -0.97183335132210136, 2.2121965703703461,  -2.3805797039674061,
        1.8732082860212154,   -0.6853973907199099, 0.093390529378433951,
    };
    const double ax = std::abs(x);
    const double t = 1.0 / (1.0 + p * ax);
    double poly = 0.0;
    for (std::size_t k = a.size(); k-- > 0;) {
        poly = poly * t + a[k];
    }
    const double y = 1.0 - t * poly * std::exp(-ax * ax);
    return x < 0.0 ? -y : y;
}

template <class T>
T gelu(T x) {
    const double xd = static_cast<double>(x);
    return static_cast<T>(0.5 * xd * (1.0 + erf_approx(xd / std::numbers::sqrt2)));
}

/// d gelu / dx = Phi(x) + x * phi(x)
template <class T>
T gelu_derivative(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + erf_approx(xd / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * xd * xd) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return static_cast<T>(cdf + xd * pdf);
}

template <class T>
T sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// conv1x1

template <class T>
struct Conv1x1Cache {
    std::optional<Tensor4<T>> input;
};

template <class T>
struct Conv1x1Grads {
    Tensor4<T> input;
    Matrix<T> weight;
    Vector<T> bias;
};

/// Pointwise channel mixing: out[b,o,h,w] = sum_i w[o,i] * x[b,i,h,w] + bias[o].
/// An empty `bias` means no bias.
template <class T>
Tensor4<T> conv1x1(const Tensor4<T>& x, const Matrix<T>& w, CSpan<T> bias = {},
                   Conv1x1Cache<T>* cache = nullptr) {
    const auto& s = x.shape();
    if (w.cols() != s.c) {
        throw DimensionError("conv1x1: weight has " + std::to_string(w.cols()) + " input channels, tensor has " +
                             std::to_string(s.c));
    }
    if (!bias.empty() && bias.size() != w.rows()) {
        throw DimensionError("conv1x1: bias length does not match output channels");
    }
    const std::size_t hw = s.plane();
    Tensor4<T> out(s.b, w.rows(), s.h, s.w);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t o = 0; o < w.rows(); ++o) {
            auto dst = out.plane(b, o);
            const T b0 = bias.empty() ? T(0) : bias[o];
            std::fill(dst.begin(), dst.end(), b0);
            for (std::size_t i = 0; i < s.c; ++i) {
                const T wv = w(o, i);
                const auto src = x.plane(b, i);
                for (std::size_t p = 0; p < hw; ++p) {
                    dst[p] += wv * src[p];
                }
            }
        }
    }
    count_flops(2ULL * s.b * hw * w.rows() * s.c);
    ensure_finite(out, "conv1x1");
    if (cache != nullptr) {
        cache->input = x;
    }
    return out;
}

template <class T>
Conv1x1Grads<T> conv1x1_backward(const Conv1x1Cache<T>& cache, const Matrix<T>& w, const Tensor4<T>& upstream) {
    if (!cache.input) {
        throw StateError("conv1x1_backward: forward cache is empty");
    }
    const Tensor4<T>& x = *cache.input;
    const auto& s = x.shape();
    if (upstream.shape() != Shape4{s.b, w.rows(), s.h, s.w}) {
        throw DimensionError("conv1x1_backward: upstream shape " + upstream.shape().str());
    }
    const std::size_t hw = s.plane();
    Conv1x1Grads<T> g{Tensor4<T>(s), Matrix<T>(w.rows(), w.cols()), Vector<T>(w.rows(), T(0))};
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t o = 0; o < w.rows(); ++o) {
            const auto up = upstream.plane(b, o);
            T bsum = T(0);
            for (std::size_t p = 0; p < hw; ++p) {
                bsum += up[p];
            }
            g.bias[o] += bsum;
            for (std::size_t i = 0; i < s.c; ++i) {
                const auto src = x.plane(b, i);
                auto dx = g.input.plane(b, i);
                const T wv = w(o, i);
                T acc = T(0);
                for (std::size_t p = 0; p < hw; ++p) {
                    acc += up[p] * src[p];
                    dx[p] += wv * up[p];
                }
                g.weight(o, i) += acc;
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// adaptive average pooling

/// Half-open input range [start, end) covered by output cell `i` of `out` cells.
constexpr std::pair<std::size_t, std::size_t> pool_window(std::size_t i, std::size_t in, std::size_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

template <class T>
struct PoolCache {
    std::optional<Shape4> input_shape;
};

template <class T>
Tensor4<T> adaptive_avg_pool(const Tensor4<T>& x, long k, PoolCache<T>* cache = nullptr) {
    if (k <= 0) {
        throw ArgumentError("adaptive_avg_pool: output size must be positive");
    }
    const auto& s = x.shape();
    const auto ks = static_cast<std::size_t>(k);
    if (ks > s.h || ks > s.w) {
        throw DimensionError("adaptive_avg_pool: output " + std::to_string(k) + " exceeds input " +
                             std::to_string(s.h) + "x" + std::to_string(s.w));
    }
    Tensor4<T> out(s.b, s.c, ks, ks);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            for (std::size_t i = 0; i < ks; ++i) {
                const auto [h0, h1] = pool_window(i, s.h, ks);
                for (std::size_t j = 0; j < ks; ++j) {
                    const auto [w0, w1] = pool_window(j, s.w, ks);
                    T sum = T(0);
                    for (std::size_t h = h0; h < h1; ++h) {
                        for (std::size_t w = w0; w < w1; ++w) {
                            sum += x(b, c, h, w);
                        }
                    }
                    out(b, c, i, j) = sum / static_cast<T>((h1 - h0) * (w1 - w0));
                }
            }
        }
    }
    count_flops(s.numel());
    ensure_finite(out, "adaptive_avg_pool");
    if (cache != nullptr) {
        cache->input_shape = s;
    }
    return out;
}

template <class T>
Tensor4<T> adaptive_avg_pool_backward(const PoolCache<T>& cache, const Tensor4<T>& upstream) {
    if (!cache.input_shape) {
        throw StateError("adaptive_avg_pool_backward: forward cache is empty");
    }
    const Shape4 s = *cache.input_shape;
    const std::size_t ks = upstream.height();
    if (upstream.batch() != s.b || upstream.channels() != s.c || upstream.width() != ks) {
        throw DimensionError("adaptive_avg_pool_backward: upstream shape " + upstream.shape().str());
    }
    Tensor4<T> dx(s);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            for (std::size_t i = 0; i < ks; ++i) {
                const auto [h0, h1] = pool_window(i, s.h, ks);
                for (std::size_t j = 0; j < ks; ++j) {
                    const auto [w0, w1] = pool_window(j, s.w, ks);
                    const T share = upstream(b, c, i, j) / static_cast<T>((h1 - h0) * (w1 - w0));
                    for (std::size_t h = h0; h < h1; ++h) {
                        for (std::size_t w = w0; w < w1; ++w) {
                            dx(b, c, h, w) += share;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// linear

template <class T>
struct LinearCache {
    std::optional<Vector<T>> input;
};

template <class T>
struct LinearGrads {
    Vector<T> input;
    Matrix<T> weight;
    Vector<T> bias;
};

template <class T>
Vector<T> linear(CSpan<T> v, const Matrix<T>& w, CSpan<T> bias = {},
                 LinearCache<T>* cache = nullptr) {
    if (w.cols() != v.size()) {
        throw DimensionError("linear: weight expects " + std::to_string(w.cols()) + " inputs, got " +
                             std::to_string(v.size()));
    }
    if (!bias.empty() && bias.size() != w.rows()) {
        throw DimensionError("linear: bias length does not match output size");
    }
    Vector<T> out(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) {
        T acc = bias.empty() ? T(0) : bias[r];
        const auto row = w.row(r);
        for (std::size_t c = 0; c < v.size(); ++c) {
            acc += row[c] * v[c];
        }
        out[r] = acc;
    }
    count_flops(2ULL * w.rows() * w.cols());
    ensure_finite<T>(out, "linear");
    if (cache != nullptr) {
        cache->input = Vector<T>(v.begin(), v.end());
    }
    return out;
}

template <class T>
LinearGrads<T> linear_backward(const LinearCache<T>& cache, const Matrix<T>& w, CSpan<T> upstream) {
    if (!cache.input) {
        throw StateError("linear_backward: forward cache is empty");
    }
    const Vector<T>& v = *cache.input;
    if (upstream.size() != w.rows()) {
        throw DimensionError("linear_backward: upstream length does not match output size");
    }
    LinearGrads<T> g{Vector<T>(v.size(), T(0)), Matrix<T>(w.rows(), w.cols()),
                     Vector<T>(upstream.begin(), upstream.end())};
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < v.size(); ++c) {
            g.weight(r, c) = upstream[r] * v[c];
            g.input[c] += w(r, c) * upstream[r];
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// elementwise activations on tensors

template <class T>
struct ActivationCache {
    std::optional<Tensor4<T>> input;
};

template <class T>
Tensor4<T> gelu(const Tensor4<T>& x, ActivationCache<T>* cache = nullptr) {
    Tensor4<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = gelu(x[i]);
    }
    ensure_finite(out, "gelu");
    if (cache != nullptr) {
        cache->input = x;
    }
    return out;
}

template <class T>
Tensor4<T> gelu_backward(const ActivationCache<T>& cache, const Tensor4<T>& upstream) {
    if (!cache.input) {
        throw StateError("gelu_backward: forward cache is empty");
    }
    const Tensor4<T>& x = *cache.input;
    if (upstream.shape() != x.shape()) {
        throw DimensionError("gelu_backward: upstream shape mismatch");
    }
    Tensor4<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        dx[i] = upstream[i] * gelu_derivative(x[i]);
    }
    return dx;
}

template <class T>
Tensor4<T> sigmoid(const Tensor4<T>& x, ActivationCache<T>* cache = nullptr) {
    Tensor4<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = sigmoid(x[i]);
    }
    if (cache != nullptr) {
        cache->input = x;
    }
    return out;
}

template <class T>
Tensor4<T> sigmoid_backward(const ActivationCache<T>& cache, const Tensor4<T>& upstream) {
    if (!cache.input) {
        throw StateError("sigmoid_backward: forward cache is empty");
    }
    const Tensor4<T>& x = *cache.input;
    if (upstream.shape() != x.shape()) {
        throw DimensionError("sigmoid_backward: upstream shape mismatch");
    }
    Tensor4<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T s = sigmoid(x[i]);
        dx[i] = upstream[i] * s * (T(1) - s);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// softmax

/// Temperature softmax, always max-subtracted.
template <class T>
Vector<T> softmax(CSpan<T> s, T tau = T(1)) {
    if (s.empty()) {
        throw ArgumentError("softmax: empty input");
    }
    if (!(tau > T(0))) {
        throw ArgumentError("softmax: temperature must be positive");
    }
    T m = s[0];
    for (const T v : s) {
        m = std::max(m, v);
    }
    Vector<T> out(s.size());
    T z = T(0);
    for (std::size_t j = 0; j < s.size(); ++j) {
        out[j] = std::exp((s[j] - m) / tau);
        z += out[j];
    }
    for (auto& v : out) {
        v /= z;
    }
    return out;
}

/// Vector-Jacobian product of softmax given its output y:
/// ds_k = (y_k / tau) * (g_k - sum_j g_j y_j).
template <class T>
Vector<T> softmax_backward(CSpan<T> y, CSpan<T> upstream, T tau = T(1)) {
    if (y.size() != upstream.size()) {
        throw DimensionError("softmax_backward: size mismatch");
    }
    T dot = T(0);
    for (std::size_t j = 0; j < y.size(); ++j) {
        dot += upstream[j] * y[j];
    }
    Vector<T> ds(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) {
        ds[k] = y[k] * (upstream[k] - dot) / tau;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// layer norm

inline constexpr double kLayerNormEps = 1e-6;

/// Standardize a single channel vector, then apply gain/offset. Population variance.
template <class T>
Vector<T> layer_norm(CSpan<T> x, CSpan<T> gain, CSpan<T> offset,
                     T eps = T(kLayerNormEps)) {
    const std::size_t n = x.size();
    if (n == 0 || gain.size() != n || offset.size() != n) {
        throw DimensionError("layer_norm: vector sizes disagree");
    }
    T mean = T(0);
    for (const T v : x) {
        mean += v;
    }
    mean /= static_cast<T>(n);
    T var = T(0);
    for (const T v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    Vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (x[i] - mean) * inv * gain[i] + offset[i];
    }
    return out;
}

template <class T>
struct LayerNormCache {
    std::optional<Tensor4<T>> normalized; // x-hat
    std::optional<Vector<T>> inv_std;     // one per (b, h, w), ordered b-major
};

template <class T>
struct LayerNormGrads {
    Tensor4<T> input;
    Vector<T> gain;
    Vector<T> offset;
};

/// Layer norm over the channel axis at every (b, h, w) position.
template <class T>
Tensor4<T> layer_norm_channels(const Tensor4<T>& x, CSpan<T> gain, CSpan<T> offset,
                               T eps = T(kLayerNormEps), LayerNormCache<T>* cache = nullptr) {
    const auto& s = x.shape();
    if (gain.size() != s.c || offset.size() != s.c || s.c == 0) {
        throw DimensionError("layer_norm_channels: gain/offset length must equal channel count");
    }
    Tensor4<T> out(s);
    Tensor4<T> xhat(s);
    Vector<T> inv_std(s.b * s.plane());
    const std::size_t hw = s.plane();
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
            T mean = T(0);
            for (std::size_t c = 0; c < s.c; ++c) {
                mean += x.plane(b, c)[p];
            }
            mean /= static_cast<T>(s.c);
            T var = T(0);
            for (std::size_t c = 0; c < s.c; ++c) {
                const T d = x.plane(b, c)[p] - mean;
                var += d * d;
            }
            var /= static_cast<T>(s.c);
            const T inv = T(1) / std::sqrt(var + eps);
            inv_std[b * hw + p] = inv;
            for (std::size_t c = 0; c < s.c; ++c) {
                const T n = (x.plane(b, c)[p] - mean) * inv;
                xhat.plane(b, c)[p] = n;
                out.plane(b, c)[p] = n * gain[c] + offset[c];
            }
        }
    }
    ensure_finite(out, "layer_norm");
    if (cache != nullptr) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

template <class T>
LayerNormGrads<T> layer_norm_channels_backward(const LayerNormCache<T>& cache, CSpan<T> gain,
                                               const Tensor4<T>& upstream) {
    if (!cache.normalized || !cache.inv_std) {
        throw StateError("layer_norm_backward: forward cache is empty");
    }
    const Tensor4<T>& xhat = *cache.normalized;
    const auto& s = xhat.shape();
    if (upstream.shape() != s) {
        throw DimensionError("layer_norm_backward: upstream shape mismatch");
    }
    const std::size_t hw = s.plane();
    LayerNormGrads<T> g{Tensor4<T>(s), Vector<T>(s.c, T(0)), Vector<T>(s.c, T(0))};
    const auto cn = static_cast<T>(s.c);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
            T mean_g = T(0);
            T mean_gx = T(0);
            for (std::size_t c = 0; c < s.c; ++c) {
                const T up = upstream.plane(b, c)[p];
                const T xh = xhat.plane(b, c)[p];
                g.gain[c] += up * xh;
                g.offset[c] += up;
                const T gy = up * gain[c];
                mean_g += gy;
                mean_gx += gy * xh;
            }
            mean_g /= cn;
            mean_gx /= cn;
            const T inv = (*cache.inv_std)[b * hw + p];
            for (std::size_t c = 0; c < s.c; ++c) {
                const T gy = upstream.plane(b, c)[p] * gain[c];
                g.input.plane(b, c)[p] = inv * (gy - mean_g - xhat.plane(b, c)[p] * mean_gx);
            }
        }
    }
    return g;
}

} // namespace atconv
