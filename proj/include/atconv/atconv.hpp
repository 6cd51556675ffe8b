#pragma once

// Attentive Convolution: context-to-kernel translation, kernel modulation,
// value projection, dynamic depthwise aggregation and output projection.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atconv/atck.hpp"
#include "atconv/error.hpp"
#include "atconv/parallel.hpp"
#include "atconv/primitives.hpp"
#include "atconv/rng.hpp"
#include "atconv/tensor.hpp"

namespace atconv {

enum class KernelMod { none, softmax, central_diff, dkm };

inline std::string kernel_mod_name(KernelMod m) {
    switch (m) {
    case KernelMod::none:
        return "none";
    case KernelMod::softmax:
        return "softmax";
    case KernelMod::central_diff:
        return "central_diff";
    case KernelMod::dkm:
        return "dkm";
    }
    return "unknown";
}

inline KernelMod parse_kernel_mod(const std::string& s) {
    for (auto m : {KernelMod::none, KernelMod::softmax, KernelMod::central_diff, KernelMod::dkm}) {
        if (kernel_mod_name(m) == s) {
            return m;
        }
    }
    throw ArgumentError("unknown kernel modulation '" + s + "'");
}

inline void check_kernel_size(long k) {
    if (k < 1 || k % 2 == 0) {
        throw ArgumentError("kernel size must be odd and >= 1, got " + std::to_string(k));
    }
}

/// Learnable weights of one ATConv operator with C channels and a K x K kernel.
template <class T>
struct ATConvParams {
    std::size_t channels = 0;
    std::size_t kernel = 3;
    Matrix<T> w_f;  // C x C, pointwise conv feeding the kernel generator
    Vector<T> w_f_bias;
    Matrix<T> w_gen;  // K^2 x K^2, shared across channels and batch, no bias
    Vector<T> gamma;  // C inhibition logits, lambda_c = sigmoid(gamma_c)
    Matrix<T> w_value;
    Vector<T> w_value_bias;
    Matrix<T> w_out;
    Vector<T> w_out_bias;

    std::size_t taps() const { return kernel * kernel; }

    static ATConvParams zeros(std::size_t c, std::size_t k) {
        check_kernel_size(static_cast<long>(k));
        ATConvParams p;
        p.channels = c;
        p.kernel = k;
        p.w_f = Matrix<T>(c, c);
        p.w_f_bias.assign(c, T(0));
        p.w_gen = Matrix<T>(k * k, k * k);
        p.gamma.assign(c, T(0));
        p.w_value = Matrix<T>(c, c);
        p.w_value_bias.assign(c, T(0));
        p.w_out = Matrix<T>(c, c);
        p.w_out_bias.assign(c, T(0));
        return p;
    }

    /// Projections ~ U(+-sqrt(1/C)) with zero biases; w_gen = I + U(+-0.01); gamma = 0.
    static ATConvParams init(std::size_t c, std::size_t k, Rng& rng) {
        ATConvParams p = zeros(c, k);
        const double bound = std::sqrt(1.0 / static_cast<double>(c));
        for (auto* m : {&p.w_f, &p.w_value, &p.w_out}) {
            for (auto& v : m->data()) {
                v = static_cast<T>(rng.uniform(-bound, bound));
            }
        }
        for (std::size_t r = 0; r < k * k; ++r) {
            for (std::size_t col = 0; col < k * k; ++col) {
                p.w_gen(r, col) = static_cast<T>((r == col ? 1.0 : 0.0) + rng.uniform(-0.01, 0.01));
            }
        }
        return p;
    }

    void validate() const {
        check_kernel_size(static_cast<long>(kernel));
        const std::size_t c = channels;
        const std::size_t kk = taps();
        const bool ok = w_f.rows() == c && w_f.cols() == c && w_f_bias.size() == c && w_gen.rows() == kk &&
                        w_gen.cols() == kk && gamma.size() == c && w_value.rows() == c && w_value.cols() == c &&
                        w_value_bias.size() == c && w_out.rows() == c && w_out.cols() == c &&
                        w_out_bias.size() == c;
        if (!ok) {
            throw DimensionError("ATConvParams: tensor sizes inconsistent with C=" + std::to_string(c) +
                                 ", K=" + std::to_string(kernel));
        }
    }

    /// Named views over every tensor, in canonical checkpoint order.
    std::vector<std::pair<std::string, std::span<T>>> views() {
        return {{"w_f", w_f.data()},         {"w_f_bias", w_f_bias}, {"w_gen", w_gen.data()},
                {"gamma", gamma},            {"w_value", w_value.data()}, {"w_value_bias", w_value_bias},
                {"w_out", w_out.data()},     {"w_out_bias", w_out_bias}};
    }
};

/// Selects the stage of the DWConv -> ATConv roadmap.
template <class T>
struct ATConvConfig {
    bool use_kernel_generator = true;
    bool use_value_proj = true;
    bool use_out_proj = true;
    KernelMod kernel_mod = KernelMod::dkm;
    std::optional<Matrix<T>> static_kernel;  // C x K^2, used when the generator is off
    std::optional<Vector<T>> lambda_override; // test hook: pins lambda_c, bypassing sigmoid(gamma)

    static ATConvConfig full() { return {}; }

    /// Plain depthwise convolution with the given kernels (first roadmap row).
    static ATConvConfig static_depthwise(Matrix<T> kernels) {
        ATConvConfig cfg;
        cfg.use_kernel_generator = false;
        cfg.use_value_proj = false;
        cfg.use_out_proj = false;
        cfg.kernel_mod = KernelMod::none;
        cfg.static_kernel = std::move(kernels);
        return cfg;
    }

    void validate(const ATConvParams<T>& p) const {
        if (use_kernel_generator == static_kernel.has_value()) {
            throw ArgumentError("ATConvConfig: static_kernel must be present exactly when the kernel generator is off");
        }
        if (static_kernel && (static_kernel->rows() != p.channels || static_kernel->cols() != p.taps())) {
            throw DimensionError("ATConvConfig: static_kernel must be C x K^2");
        }
        if (lambda_override && lambda_override->size() != p.channels) {
            throw DimensionError("ATConvConfig: lambda_override must have C entries");
        }
        if (kernel_mod == KernelMod::central_diff && p.kernel < 3) {
            throw UnsupportedError("central-difference modulation needs K >= 3");
        }
    }
};

/// Per-sample, per-channel routing weights alpha, shape (B, C, K, K).
template <class T>
struct DynamicKernel {
    Tensor4<T> alpha;

    std::size_t size() const { return alpha.height(); }
};

/// Parameters a configuration actually uses.
template <class T>
std::size_t param_count(const ATConvParams<T>& p, const ATConvConfig<T>& cfg) {
    const std::size_t c = p.channels;
    const std::size_t kk = p.taps();
    std::size_t n = 0;
    if (cfg.use_kernel_generator) {
        n += c * c + c + kk * kk;
    } else {
        n += c * kk;
    }
    if (cfg.kernel_mod == KernelMod::dkm) {
        n += c;
    }
    if (cfg.use_value_proj) {
        n += c * c + c;
    }
    if (cfg.use_out_proj) {
        n += c * c + c;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Context-to-kernel translation

template <class T>
struct C2KCache {
    Conv1x1Cache<T> conv;
    PoolCache<T> pool;
    ActivationCache<T> act;
    std::optional<Tensor4<T>> activated; // gelu(pooled)
};

template <class T>
struct C2KGrads {
    Tensor4<T> input;
    Matrix<T> w_f;
    Vector<T> w_f_bias;
    Matrix<T> w_gen;
};

/// Raw kernels K = Reshape(W_gen . Vec(gelu(AdaAvgPool_KxK(Conv1x1(x))))), shape (B, C, K, K).
template <class T>
Tensor4<T> c2k(const Tensor4<T>& x, const ATConvParams<T>& p, C2KCache<T>* cache = nullptr) {
    if (x.channels() != p.channels) {
        throw DimensionError("c2k: input has " + std::to_string(x.channels()) + " channels, params expect " +
                             std::to_string(p.channels));
    }
    const std::size_t k = p.kernel;
    if (x.height() < k || x.width() < k) {
        throw DimensionError("c2k: spatial size " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                             " is smaller than the kernel");
    }
    const Tensor4<T> f = conv1x1(x, p.w_f, p.w_f_bias, cache ? &cache->conv : nullptr);
    const Tensor4<T> z = adaptive_avg_pool(f, static_cast<long>(k), cache ? &cache->pool : nullptr);
    Tensor4<T> g = gelu(z, cache ? &cache->act : nullptr);
    const std::size_t kk = k * k;
    Tensor4<T> raw(g.shape());
    for (std::size_t b = 0; b < g.batch(); ++b) {
        for (std::size_t c = 0; c < g.channels(); ++c) {
            const auto src = g.plane(b, c);
            auto dst = raw.plane(b, c);
            for (std::size_t r = 0; r < kk; ++r) {
                T acc = T(0);
                for (std::size_t j = 0; j < kk; ++j) {
                    acc += p.w_gen(r, j) * src[j];
                }
                dst[r] = acc;
            }
        }
    }
    count_flops(2ULL * g.batch() * g.channels() * kk * kk);
    ensure_finite(raw, "c2k");
    if (cache != nullptr) {
        cache->activated = std::move(g);
    }
    return raw;
}

template <class T>
C2KGrads<T> c2k_backward(const C2KCache<T>& cache, const ATConvParams<T>& p, const Tensor4<T>& d_raw) {
    if (!cache.activated) {
        throw StateError("c2k_backward: forward cache is empty");
    }
    const Tensor4<T>& g = *cache.activated;
    if (d_raw.shape() != g.shape()) {
        throw DimensionError("c2k_backward: upstream shape " + d_raw.shape().str());
    }
    const std::size_t kk = p.taps();
    C2KGrads<T> out;
    out.w_gen = Matrix<T>(kk, kk);
    Tensor4<T> d_act(g.shape());
    for (std::size_t b = 0; b < g.batch(); ++b) {
        for (std::size_t c = 0; c < g.channels(); ++c) {
            const auto src = g.plane(b, c);
            const auto up = d_raw.plane(b, c);
            auto dst = d_act.plane(b, c);
            for (std::size_t r = 0; r < kk; ++r) {
                for (std::size_t j = 0; j < kk; ++j) {
                    out.w_gen(r, j) += up[r] * src[j];
                    dst[j] += p.w_gen(r, j) * up[r];
                }
            }
        }
    }
    const Tensor4<T> d_pool = gelu_backward(cache.act, d_act);
    const Tensor4<T> d_f = adaptive_avg_pool_backward(cache.pool, d_pool);
    auto conv_grads = conv1x1_backward(cache.conv, p.w_f, d_f);
    out.input = std::move(conv_grads.input);
    out.w_f = std::move(conv_grads.weight);
    out.w_f_bias = std::move(conv_grads.bias);
    return out;
}

// ---------------------------------------------------------------------------
// Kernel modulation

/// DKM with explicit per-channel strengths: alpha = raw - lambda_c * mean_uv(raw).
template <class T>
DynamicKernel<T> dkm_with_lambda(const Tensor4<T>& raw, CSpan<T> lambda) {
    ensure_finite(raw, "dkm");
    if (lambda.size() != raw.channels()) {
        throw DimensionError("dkm: lambda length does not match channels");
    }
    DynamicKernel<T> k{raw};
    const auto taps = static_cast<T>(raw.plane(0, 0).size());
    for (std::size_t b = 0; b < raw.batch(); ++b) {
        for (std::size_t c = 0; c < raw.channels(); ++c) {
            auto a = k.alpha.plane(b, c);
            T mean = T(0);
            for (const T v : raw.plane(b, c)) {
                mean += v;
            }
            mean /= taps;
            for (auto& v : a) {
                v -= lambda[c] * mean;
            }
        }
    }
    count_flops(raw.size());
    return k;
}

template <class T>
Vector<T> lambda_from_gamma(CSpan<T> gamma) {
    Vector<T> lambda(gamma.size());
    for (std::size_t c = 0; c < gamma.size(); ++c) {
        lambda[c] = sigmoid(gamma[c]);
    }
    return lambda;
}

/// Differential kernel modulation with lambda_c = sigmoid(gamma_c).
template <class T>
DynamicKernel<T> dkm(const Tensor4<T>& raw, CSpan<T> gamma) {
    const Vector<T> lambda = lambda_from_gamma<T>(gamma);
    return dkm_with_lambda(raw, CSpan<T>(lambda));
}

template <class T>
struct DkmGrads {
    Tensor4<T> raw;
    Vector<T> lambda;
};

/// d raw_uv = d alpha_uv - (lambda_c / K^2) sum d alpha; d lambda_c = -sum_b mean(raw) * sum d alpha.
template <class T>
DkmGrads<T> dkm_backward(const Tensor4<T>& raw, CSpan<T> lambda, const Tensor4<T>& d_alpha) {
    if (d_alpha.shape() != raw.shape()) {
        throw DimensionError("dkm_backward: shape mismatch");
    }
    DkmGrads<T> g{Tensor4<T>(raw.shape()), Vector<T>(raw.channels(), T(0))};
    const auto taps = static_cast<T>(raw.plane(0, 0).size());
    for (std::size_t b = 0; b < raw.batch(); ++b) {
        for (std::size_t c = 0; c < raw.channels(); ++c) {
            T sum_up = T(0);
            for (const T v : d_alpha.plane(b, c)) {
                sum_up += v;
            }
            T mean = T(0);
            for (const T v : raw.plane(b, c)) {
                mean += v;
            }
            mean /= taps;
            g.lambda[c] -= mean * sum_up;
            const auto up = d_alpha.plane(b, c);
            auto dr = g.raw.plane(b, c);
            for (std::size_t i = 0; i < dr.size(); ++i) {
                dr[i] = up[i] - lambda[c] * sum_up / taps;
            }
        }
    }
    return g;
}

/// Per-(b, c) softmax over the K^2 taps (temperature 1).
template <class T>
DynamicKernel<T> kernel_mod_softmax(const Tensor4<T>& raw) {
    DynamicKernel<T> k{Tensor4<T>(raw.shape())};
    for (std::size_t b = 0; b < raw.batch(); ++b) {
        for (std::size_t c = 0; c < raw.channels(); ++c) {
            const auto s = softmax(raw.plane(b, c), T(1));
            std::copy(s.begin(), s.end(), k.alpha.plane(b, c).begin());
        }
    }
    return k;
}

template <class T>
Tensor4<T> kernel_mod_softmax_backward(const DynamicKernel<T>& k, const Tensor4<T>& d_alpha) {
    Tensor4<T> d_raw(k.alpha.shape());
    for (std::size_t b = 0; b < d_raw.batch(); ++b) {
        for (std::size_t c = 0; c < d_raw.channels(); ++c) {
            const auto ds = softmax_backward(k.alpha.plane(b, c), d_alpha.plane(b, c), T(1));
            std::copy(ds.begin(), ds.end(), d_raw.plane(b, c).begin());
        }
    }
    return d_raw;
}

/// Central-difference form: the center tap becomes raw_center - sum(raw), other taps pass through.
template <class T>
DynamicKernel<T> kernel_mod_central_diff(const Tensor4<T>& raw) {
    const std::size_t k = raw.height();
    if (k < 3) {
        throw UnsupportedError("central-difference modulation needs K >= 3");
    }
    DynamicKernel<T> out{raw};
    const std::size_t center = (k / 2) * k + k / 2;
    for (std::size_t b = 0; b < raw.batch(); ++b) {
        for (std::size_t c = 0; c < raw.channels(); ++c) {
            T sum = T(0);
            for (const T v : raw.plane(b, c)) {
                sum += v;
            }
            out.alpha.plane(b, c)[center] -= sum;
        }
    }
    return out;
}

template <class T>
Tensor4<T> kernel_mod_central_diff_backward(const Tensor4<T>& d_alpha) {
    const std::size_t k = d_alpha.height();
    const std::size_t center = (k / 2) * k + k / 2;
    Tensor4<T> d_raw(d_alpha);
    for (std::size_t b = 0; b < d_raw.batch(); ++b) {
        for (std::size_t c = 0; c < d_raw.channels(); ++c) {
            const T dc = d_alpha.plane(b, c)[center];
            for (auto& v : d_raw.plane(b, c)) {
                v -= dc;
            }
        }
    }
    return d_raw;
}

// ---------------------------------------------------------------------------
// Value projection and dynamic depthwise aggregation

template <class T>
Tensor4<T> value_proj(const Tensor4<T>& x, const Matrix<T>& w_value, CSpan<T> bias,
                      Conv1x1Cache<T>* cache = nullptr) {
    return conv1x1(x, w_value, bias, cache);
}

/// Y[b,c,h,w] = sum_uv alpha[b,c,u,v] * V[b,c,h+u-p,w+v-p], zero padding, no kernel flip.
template <class T>
Tensor4<T> dyn_depthwise(const Tensor4<T>& v, const DynamicKernel<T>& kernel) {
    const auto& s = v.shape();
    const auto& ks = kernel.alpha.shape();
    if (ks.h != ks.w) {
        throw DimensionError("dyn_depthwise: kernel must be square");
    }
    if (ks.h % 2 == 0) {
        throw ArgumentError("dyn_depthwise: even kernel size " + std::to_string(ks.h) + " has no center");
    }
    if (ks.b != s.b || ks.c != s.c) {
        throw DimensionError("dyn_depthwise: kernel " + ks.str() + " does not match values " + s.str());
    }
    const long k = static_cast<long>(ks.h);
    const long pad = k / 2;
    const long H = static_cast<long>(s.h);
    const long W = static_cast<long>(s.w);
    Tensor4<T> y(s);
    parallel_for(s.b * s.c, [&](std::size_t bc) {
        const std::size_t b = bc / s.c;
        const std::size_t c = bc % s.c;
        const auto src = v.plane(b, c);
        const auto a = kernel.alpha.plane(b, c);
        auto dst = y.plane(b, c);
        for (long u = 0; u < k; ++u) {
            const long dh = u - pad;
            const long h0 = std::max(0L, -dh);
            const long h1 = std::min(H, H - dh);
            for (long q = 0; q < k; ++q) {
                const T wgt = a[static_cast<std::size_t>(u * k + q)];
                const long dw = q - pad;
                const long w0 = std::max(0L, -dw);
                const long w1 = std::min(W, W - dw);
                for (long h = h0; h < h1; ++h) {
                    T* out_row = dst.data() + h * W;
                    const T* in_row = src.data() + (h + dh) * W + dw;
                    for (long w = w0; w < w1; ++w) {
                        out_row[w] += wgt * in_row[w];
                    }
                }
            }
        }
    });
    count_flops(2ULL * s.numel() * ks.h * ks.w);
    ensure_finite(y, "dyn_depthwise");
    return y;
}

template <class T>
struct DepthwiseGrads {
    Tensor4<T> values;
    Tensor4<T> alpha;
};

template <class T>
DepthwiseGrads<T> dyn_depthwise_backward(const Tensor4<T>& v, const DynamicKernel<T>& kernel,
                                         const Tensor4<T>& d_y) {
    const auto& s = v.shape();
    if (d_y.shape() != s) {
        throw DimensionError("dyn_depthwise_backward: upstream shape mismatch");
    }
    const long k = static_cast<long>(kernel.size());
    const long pad = k / 2;
    const long H = static_cast<long>(s.h);
    const long W = static_cast<long>(s.w);
    DepthwiseGrads<T> g{Tensor4<T>(s), Tensor4<T>(kernel.alpha.shape())};
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const auto src = v.plane(b, c);
            const auto up = d_y.plane(b, c);
            const auto a = kernel.alpha.plane(b, c);
            auto dv = g.values.plane(b, c);
            auto da = g.alpha.plane(b, c);
            for (long u = 0; u < k; ++u) {
                const long dh = u - pad;
                const long h0 = std::max(0L, -dh);
                const long h1 = std::min(H, H - dh);
                for (long q = 0; q < k; ++q) {
                    const auto tap = static_cast<std::size_t>(u * k + q);
                    const T wgt = a[tap];
                    const long dw = q - pad;
                    const long w0 = std::max(0L, -dw);
                    const long w1 = std::min(W, W - dw);
                    T acc = T(0);
                    for (long h = h0; h < h1; ++h) {
                        const T* up_row = up.data() + h * W;
                        const T* in_row = src.data() + (h + dh) * W + dw;
                        T* dv_row = dv.data() + (h + dh) * W + dw;
                        for (long w = w0; w < w1; ++w) {
                            acc += up_row[w] * in_row[w];
                            dv_row[w] += wgt * up_row[w];
                        }
                    }
                    da[tap] = acc;
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Full operator

template <class T>
struct ATConvCache {
    std::optional<Tensor4<T>> input;
    C2KCache<T> c2k;
    std::optional<Tensor4<T>> raw;
    Vector<T> lambda;
    std::optional<DynamicKernel<T>> kernel;
    Conv1x1Cache<T> value;
    std::optional<Tensor4<T>> values;
    Conv1x1Cache<T> out;
};

template <class T>
struct ATConvGrads {
    Tensor4<T> input;
    Matrix<T> w_f;
    Vector<T> w_f_bias;
    Matrix<T> w_gen;
    Vector<T> gamma;
    Matrix<T> w_value;
    Vector<T> w_value_bias;
    Matrix<T> w_out;
    Vector<T> w_out_bias;
    Matrix<T> static_kernel; // empty unless the generator is off

    static ATConvGrads zeros_like(const ATConvParams<T>& p) {
        ATConvGrads g;
        const std::size_t c = p.channels;
        const std::size_t kk = p.taps();
        g.w_f = Matrix<T>(c, c);
        g.w_f_bias.assign(c, T(0));
        g.w_gen = Matrix<T>(kk, kk);
        g.gamma.assign(c, T(0));
        g.w_value = Matrix<T>(c, c);
        g.w_value_bias.assign(c, T(0));
        g.w_out = Matrix<T>(c, c);
        g.w_out_bias.assign(c, T(0));
        return g;
    }

    /// Same order as ATConvParams::views().
    std::vector<std::pair<std::string, std::span<T>>> views() {
        return {{"w_f", w_f.data()},         {"w_f_bias", w_f_bias}, {"w_gen", w_gen.data()},
                {"gamma", gamma},            {"w_value", w_value.data()}, {"w_value_bias", w_value_bias},
                {"w_out", w_out.data()},     {"w_out_bias", w_out_bias}};
    }
};

/// Kernel routing weights for x under a configuration (generation and modulation, no aggregation).
template <class T>
DynamicKernel<T> atconv_kernel(const Tensor4<T>& x, const ATConvParams<T>& p, const ATConvConfig<T>& cfg,
                               ATConvCache<T>* cache = nullptr) {
    Tensor4<T> raw;
    if (cfg.use_kernel_generator) {
        raw = c2k(x, p, cache ? &cache->c2k : nullptr);
    } else {
        const Matrix<T>& sk = *cfg.static_kernel;
        raw = Tensor4<T>(x.batch(), p.channels, p.kernel, p.kernel);
        for (std::size_t b = 0; b < x.batch(); ++b) {
            for (std::size_t c = 0; c < p.channels; ++c) {
                const auto row = sk.row(c);
                std::copy(row.begin(), row.end(), raw.plane(b, c).begin());
            }
        }
    }
    DynamicKernel<T> kernel;
    Vector<T> lambda;
    switch (cfg.kernel_mod) {
    case KernelMod::none:
        kernel.alpha = raw;
        break;
    case KernelMod::softmax:
        kernel = kernel_mod_softmax(raw);
        break;
    case KernelMod::central_diff:
        kernel = kernel_mod_central_diff(raw);
        break;
    case KernelMod::dkm:
        lambda = cfg.lambda_override ? *cfg.lambda_override : lambda_from_gamma<T>(p.gamma);
        kernel = dkm_with_lambda(raw, CSpan<T>(lambda));
        break;
    }
    if (cache != nullptr) {
        cache->raw = std::move(raw);
        cache->lambda = std::move(lambda);
        cache->kernel = kernel;
    }
    return kernel;
}

/// Full operator. Output shape equals input shape.
template <class T>
Tensor4<T> atconv_forward(const Tensor4<T>& x, const ATConvParams<T>& p, const ATConvConfig<T>& cfg,
                          ATConvCache<T>* cache = nullptr) {
    p.validate();
    cfg.validate(p);
    if (x.channels() != p.channels) {
        throw DimensionError("atconv_forward: input has " + std::to_string(x.channels()) +
                             " channels, params expect " + std::to_string(p.channels));
    }
    const DynamicKernel<T> kernel = atconv_kernel(x, p, cfg, cache);
    Tensor4<T> v = cfg.use_value_proj ? value_proj(x, p.w_value, CSpan<T>(p.w_value_bias), cache ? &cache->value : nullptr)
                                      : x;
    Tensor4<T> y = dyn_depthwise(v, kernel);
    if (cache != nullptr) {
        cache->input = x;
        cache->values = std::move(v);
    }
    if (cfg.use_out_proj) {
        return conv1x1(y, p.w_out, CSpan<T>(p.w_out_bias), cache ? &cache->out : nullptr);
    }
    return y;
}

template <class T>
ATConvGrads<T> atconv_backward(const ATConvCache<T>& cache, const ATConvParams<T>& p, const ATConvConfig<T>& cfg,
                               const Tensor4<T>& upstream) {
    if (!cache.input || !cache.kernel || !cache.values || !cache.raw) {
        throw StateError("atconv_backward: forward cache is empty");
    }
    const Tensor4<T>& x = *cache.input;
    if (upstream.shape() != x.shape()) {
        throw DimensionError("atconv_backward: upstream shape " + upstream.shape().str() + " vs input " +
                             x.shape().str());
    }
    ATConvGrads<T> g = ATConvGrads<T>::zeros_like(p);

    Tensor4<T> d_y = upstream;
    if (cfg.use_out_proj) {
        auto og = conv1x1_backward(cache.out, p.w_out, upstream);
        d_y = std::move(og.input);
        g.w_out = std::move(og.weight);
        g.w_out_bias = std::move(og.bias);
    }

    auto dg = dyn_depthwise_backward(*cache.values, *cache.kernel, d_y);
    if (cfg.use_value_proj) {
        auto vg = conv1x1_backward(cache.value, p.w_value, dg.values);
        g.input = std::move(vg.input);
        g.w_value = std::move(vg.weight);
        g.w_value_bias = std::move(vg.bias);
    } else {
        g.input = std::move(dg.values);
    }

    Tensor4<T> d_raw;
    switch (cfg.kernel_mod) {
    case KernelMod::none:
        d_raw = std::move(dg.alpha);
        break;
    case KernelMod::softmax:
        d_raw = kernel_mod_softmax_backward(*cache.kernel, dg.alpha);
        break;
    case KernelMod::central_diff:
        d_raw = kernel_mod_central_diff_backward(dg.alpha);
        break;
    case KernelMod::dkm: {
        auto kg = dkm_backward(*cache.raw, CSpan<T>(cache.lambda), dg.alpha);
        d_raw = std::move(kg.raw);
        if (!cfg.lambda_override) {
            for (std::size_t c = 0; c < p.channels; ++c) {
                const T s = cache.lambda[c];
                g.gamma[c] = kg.lambda[c] * s * (T(1) - s);
            }
        }
        break;
    }
    }

    if (cfg.use_kernel_generator) {
        auto cg = c2k_backward(cache.c2k, p, d_raw);
        for (std::size_t i = 0; i < g.input.size(); ++i) {
            g.input[i] += cg.input[i];
        }
        g.w_f = std::move(cg.w_f);
        g.w_f_bias = std::move(cg.w_f_bias);
        g.w_gen = std::move(cg.w_gen);
    } else {
        g.static_kernel = Matrix<T>(p.channels, p.taps());
        for (std::size_t b = 0; b < d_raw.batch(); ++b) {
            for (std::size_t c = 0; c < p.channels; ++c) {
                const auto src = d_raw.plane(b, c);
                for (std::size_t t = 0; t < src.size(); ++t) {
                    g.static_kernel(c, t) += src[t];
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Roadmap from a static depthwise conv to the full operator

struct RoadmapStage {
    std::string name;
    bool use_kernel_generator;
    bool use_out_proj;
    bool use_value_proj;
    KernelMod kernel_mod;
};

/// Stages in roadmap order; the last three are alternatives on the kernel-modulation axis.
inline std::vector<RoadmapStage> roadmap_stages() {
    return {
        {"dwconv", false, false, false, KernelMod::none},
        {"+kernel_generator", true, false, false, KernelMod::none},
        {"+out_proj", true, true, false, KernelMod::none},
        {"+value_proj", true, true, true, KernelMod::none},
        {"+softmax_on_K", true, true, true, KernelMod::softmax},
        {"+central_diff_on_K", true, true, true, KernelMod::central_diff},
        {"+dkm_on_K", true, true, true, KernelMod::dkm},
    };
}

/// `static_kernel` (C x K^2) is attached only when the stage has no generator.
template <class T>
ATConvConfig<T> make_config(const RoadmapStage& stage, const Matrix<T>& static_kernel) {
    ATConvConfig<T> cfg;
    cfg.use_kernel_generator = stage.use_kernel_generator;
    cfg.use_out_proj = stage.use_out_proj;
    cfg.use_value_proj = stage.use_value_proj;
    cfg.kernel_mod = stage.kernel_mod;
    if (!stage.use_kernel_generator) {
        cfg.static_kernel = static_kernel;
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Serialization

template <class T>
std::vector<AtckEntry> to_atck(const ATConvParams<T>& p, const std::string& prefix = "") {
    const std::size_t c = p.channels;
    const std::size_t kk = p.taps();
    return {
        make_entry(prefix + "w_f", {c, c}, p.w_f.data()),
        make_entry(prefix + "w_f_bias", {c}, p.w_f_bias),
        make_entry(prefix + "w_gen", {kk, kk}, p.w_gen.data()),
        make_entry(prefix + "gamma", {c}, p.gamma),
        make_entry(prefix + "w_value", {c, c}, p.w_value.data()),
        make_entry(prefix + "w_value_bias", {c}, p.w_value_bias),
        make_entry(prefix + "w_out", {c, c}, p.w_out.data()),
        make_entry(prefix + "w_out_bias", {c}, p.w_out_bias),
    };
}

template <class T>
ATConvParams<T> atconv_params_from_atck(const std::vector<AtckEntry>& entries, const std::string& prefix = "") {
    const AtckEntry& wf = find_entry(entries, prefix + "w_f");
    const AtckEntry& wg = find_entry(entries, prefix + "w_gen");
    if (wf.shape.size() != 2 || wg.shape.size() != 2) {
        throw FormatError("ATCK: w_f and w_gen must be matrices");
    }
    const std::size_t c = wf.shape[0];
    const auto k = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(wg.shape[0]))));
    ATConvParams<T> p = ATConvParams<T>::zeros(c, k);
    for (auto& [name, view] : p.views()) {
        const auto vals = entry_values<T>(find_entry(entries, prefix + name), view.size());
        std::copy(vals.begin(), vals.end(), view.begin());
    }
    return p;
}

} // namespace atconv
