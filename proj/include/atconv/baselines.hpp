#pragma once

// Reference operators: dense static conv, static depthwise conv and a
// single-head global self-attention, plus a common Operator interface.

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "atconv/atconv.hpp"
#include "atconv/error.hpp"
#include "atconv/parallel.hpp"
#include "atconv/primitives.hpp"
#include "atconv/rng.hpp"
#include "atconv/tensor.hpp"

namespace atconv {

// ---------------------------------------------------------------------------
// Dense static convolution

template <class T>
struct StaticConvParams {
    Tensor4<T> weights; // (C_out, C_in, K, K)
    Vector<T> bias;     // empty: no bias

    std::size_t out_channels() const { return weights.batch(); }
    std::size_t in_channels() const { return weights.channels(); }
    std::size_t kernel() const { return weights.height(); }

    void validate() const {
        if (weights.height() != weights.width()) {
            throw DimensionError("static_conv: kernel must be square");
        }
        check_kernel_size(static_cast<long>(weights.height()));
        if (!bias.empty() && bias.size() != out_channels()) {
            throw DimensionError("static_conv: bias length does not match output channels");
        }
    }

    static StaticConvParams init(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) {
        const double bound = std::sqrt(1.0 / static_cast<double>(c_in * k * k));
        return {random_tensor<T>({c_out, c_in, k, k}, rng, -bound, bound), {}};
    }
};

template <class T>
struct StaticConvGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    Vector<T> bias;
};

/// Stride 1, zero padding K/2, cross-correlation.
template <class T>
Tensor4<T> static_conv(const Tensor4<T>& x, const StaticConvParams<T>& p) {
    p.validate();
    const auto& s = x.shape();
    if (p.in_channels() != s.c) {
        throw DimensionError("static_conv: weights expect " + std::to_string(p.in_channels()) +
                             " input channels, tensor has " + std::to_string(s.c));
    }
    const long k = static_cast<long>(p.kernel());
    const long pad = k / 2;
    const long H = static_cast<long>(s.h);
    const long W = static_cast<long>(s.w);
    Tensor4<T> y(s.b, p.out_channels(), s.h, s.w);
    parallel_for(s.b * p.out_channels(), [&](std::size_t bo) {
        const std::size_t b = bo / p.out_channels();
        const std::size_t o = bo % p.out_channels();
        auto dst = y.plane(b, o);
        std::fill(dst.begin(), dst.end(), p.bias.empty() ? T(0) : p.bias[o]);
        for (std::size_t i = 0; i < s.c; ++i) {
            const auto src = x.plane(b, i);
            for (long u = 0; u < k; ++u) {
                const long dh = u - pad;
                const long h0 = std::max(0L, -dh);
                const long h1 = std::min(H, H - dh);
                for (long q = 0; q < k; ++q) {
                    const T wgt = p.weights(o, i, static_cast<std::size_t>(u), static_cast<std::size_t>(q));
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
        }
    });
    count_flops(2ULL * s.b * s.plane() * p.out_channels() * s.c * p.kernel() * p.kernel());
    ensure_finite(y, "static_conv");
    return y;
}

template <class T>
StaticConvGrads<T> static_conv_backward(const Tensor4<T>& x, const StaticConvParams<T>& p,
                                        const Tensor4<T>& upstream) {
    const auto& s = x.shape();
    if (upstream.shape() != Shape4{s.b, p.out_channels(), s.h, s.w}) {
        throw DimensionError("static_conv_backward: upstream shape " + upstream.shape().str());
    }
    const long k = static_cast<long>(p.kernel());
    const long pad = k / 2;
    const long H = static_cast<long>(s.h);
    const long W = static_cast<long>(s.w);
    StaticConvGrads<T> g{Tensor4<T>(s), Tensor4<T>(p.weights.shape()),
                         Vector<T>(p.bias.empty() ? 0 : p.out_channels(), T(0))};
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t o = 0; o < p.out_channels(); ++o) {
            const auto up = upstream.plane(b, o);
            if (!g.bias.empty()) {
                for (T v : up) g.bias[o] += v;
            }
            for (std::size_t i = 0; i < s.c; ++i) {
                const auto src = x.plane(b, i);
                auto dx = g.input.plane(b, i);
                for (long u = 0; u < k; ++u) {
                    const long dh = u - pad;
                    const long h0 = std::max(0L, -dh);
                    const long h1 = std::min(H, H - dh);
                    for (long q = 0; q < k; ++q) {
                        const auto uu = static_cast<std::size_t>(u);
                        const auto qq = static_cast<std::size_t>(q);
                        const T wgt = p.weights(o, i, uu, qq);
                        const long dw = q - pad;
                        const long w0 = std::max(0L, -dw);
                        const long w1 = std::min(W, W - dw);
                        T acc = T(0);
                        for (long h = h0; h < h1; ++h) {
                            const T* up_row = up.data() + h * W;
                            const T* in_row = src.data() + (h + dh) * W + dw;
                            T* dx_row = dx.data() + (h + dh) * W + dw;
                            for (long w = w0; w < w1; ++w) {
                                acc += up_row[w] * in_row[w];
                                dx_row[w] += wgt * up_row[w];
                            }
                        }
                        g.weights(o, i, uu, qq) += acc;
                    }
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Static depthwise convolution

/// `kernels` is (1, C, K, K): one fixed kernel per channel, shared across the batch.
template <class T>
Tensor4<T> static_depthwise(const Tensor4<T>& x, const Tensor4<T>& kernels) {
    const auto& s = x.shape();
    const auto& ks = kernels.shape();
    if (ks.b != 1 || ks.c != s.c || ks.h != ks.w) {
        throw DimensionError("static_depthwise: kernels " + ks.str() + " do not match input " + s.str());
    }
    check_kernel_size(static_cast<long>(ks.h));
    const long k = static_cast<long>(ks.h);
    const long pad = k / 2;
    Tensor4<T> y(s);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            for (long h = 0; h < static_cast<long>(s.h); ++h) {
                for (long w = 0; w < static_cast<long>(s.w); ++w) {
                    T acc = T(0);
                    for (long u = 0; u < k; ++u) {
                        const long hh = h + u - pad;
                        if (hh < 0 || hh >= static_cast<long>(s.h)) continue;
                        for (long q = 0; q < k; ++q) {
                            const long ww = w + q - pad;
                            if (ww < 0 || ww >= static_cast<long>(s.w)) continue;
                            acc += kernels(0, c, std::size_t(u), std::size_t(q)) * x(b, c, std::size_t(hh), std::size_t(ww));
                        }
                    }
                    y(b, c, std::size_t(h), std::size_t(w)) = acc;
                }
            }
        }
    }
    count_flops(2ULL * s.numel() * ks.h * ks.w);
    return y;
}

/// The transpose of static_depthwise: the kernel is applied flipped.
template <class T>
Tensor4<T> static_depthwise_input_grad(const Tensor4<T>& kernels, const Tensor4<T>& upstream) {
    const auto& s = upstream.shape();
    const long k = static_cast<long>(kernels.height());
    const long pad = k / 2;
    Tensor4<T> dx(s);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            for (long h = 0; h < static_cast<long>(s.h); ++h) {
                for (long w = 0; w < static_cast<long>(s.w); ++w) {
                    const T up = upstream(b, c, std::size_t(h), std::size_t(w));
                    for (long u = 0; u < k; ++u) {
                        const long hh = h + u - pad;
                        if (hh < 0 || hh >= static_cast<long>(s.h)) continue;
                        for (long q = 0; q < k; ++q) {
                            const long ww = w + q - pad;
                            if (ww < 0 || ww >= static_cast<long>(s.w)) continue;
                            dx(b, c, std::size_t(hh), std::size_t(ww)) += kernels(0, c, std::size_t(u), std::size_t(q)) * up;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Toy self-attention

template <class T>
struct ToySAParams {
    Matrix<T> w_q; // d x C
    Matrix<T> w_k;
    Matrix<T> w_v;
    Matrix<T> w_o; // C x d
    T tau = T(1);

    std::size_t channels() const { return w_q.cols(); }
    std::size_t dim() const { return w_q.rows(); }

    void validate() const {
        const std::size_t d = dim();
        const std::size_t c = channels();
        if (w_k.rows() != d || w_k.cols() != c || w_v.rows() != d || w_v.cols() != c || w_o.rows() != c ||
            w_o.cols() != d) {
            throw DimensionError("toy_self_attention: projection shapes disagree");
        }
        if (!(tau > T(0))) {
            throw ArgumentError("toy_self_attention: tau must be positive");
        }
    }

    /// Uniform(+-sqrt(1/fan_in)) projections and tau = sqrt(d).
    static ToySAParams init(std::size_t c, std::size_t d, Rng& rng) {
        const double bq = std::sqrt(1.0 / static_cast<double>(c));
        const double bo = std::sqrt(1.0 / static_cast<double>(d));
        return {random_matrix<T>(d, c, rng, -bq, bq), random_matrix<T>(d, c, rng, -bq, bq),
                random_matrix<T>(d, c, rng, -bq, bq), random_matrix<T>(c, d, rng, -bo, bo),
                static_cast<T>(std::sqrt(static_cast<double>(d)))};
    }
};

/// Per-batch intermediates, each row-major with N = H*W token rows.
template <class T>
struct ToySACache {
    std::optional<Tensor4<T>> input;
    std::vector<Vector<T>> q, k, v, attn, mixed; // N x d, N x d, N x d, N x N, N x d
};

template <class T>
struct ToySAGrads {
    Tensor4<T> input;
    Matrix<T> w_q, w_k, w_v, w_o;
};

namespace detail {

// out (n x m) = a (n x r) * b^T, with b (m x r)
template <class T>
void matmul_nt(const T* a, const T* b, T* out, std::size_t n, std::size_t m, std::size_t r) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            T acc = T(0);
            for (std::size_t t = 0; t < r; ++t) acc += a[i * r + t] * b[j * r + t];
            out[i * m + j] = acc;
        }
    }
    count_flops(2ULL * n * m * r);
}

// out (n x m) += a (n x r) * b, with b (r x m)
template <class T>
void matmul_nn_acc(const T* a, const T* b, T* out, std::size_t n, std::size_t m, std::size_t r) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < r; ++t) {
            const T av = a[i * r + t];
            const T* brow = b + t * m;
            T* orow = out + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    count_flops(2ULL * n * m * r);
}

// out (n x m) += a^T * b, with a (r x n), b (r x m)
template <class T>
void matmul_tn_acc(const T* a, const T* b, T* out, std::size_t n, std::size_t m, std::size_t r) {
    for (std::size_t t = 0; t < r; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            const T av = a[t * n + i];
            const T* brow = b + t * m;
            T* orow = out + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    count_flops(2ULL * n * m * r);
}

/// (B,C,H,W) batch b -> N x C token matrix.
template <class T>
Vector<T> tokens(const Tensor4<T>& x, std::size_t b) {
    const std::size_t n = x.height() * x.width();
    const std::size_t c = x.channels();
    Vector<T> out(n * c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const auto src = x.plane(b, ch);
        for (std::size_t i = 0; i < n; ++i) out[i * c + ch] = src[i];
    }
    return out;
}

} // namespace detail

/// Single-head attention over the H*W tokens of each sample, no positional encoding.
template <class T>
Tensor4<T> toy_self_attention(const Tensor4<T>& x, const ToySAParams<T>& p, ToySACache<T>* cache = nullptr) {
    p.validate();
    const auto& s = x.shape();
    if (s.c != p.channels()) {
        throw DimensionError("toy_self_attention: input has " + std::to_string(s.c) + " channels, params expect " +
                             std::to_string(p.channels()));
    }
    const std::size_t n = s.plane();
    const std::size_t c = s.c;
    const std::size_t d = p.dim();
    Tensor4<T> y(s);
    if (cache != nullptr) {
        cache->input = x;
        for (auto* v : {&cache->q, &cache->k, &cache->v, &cache->attn, &cache->mixed}) v->assign(s.b, {});
    }
    for (std::size_t b = 0; b < s.b; ++b) {
        const Vector<T> tok = detail::tokens(x, b);
        Vector<T> q(n * d), k(n * d), v(n * d);
        detail::matmul_nt(tok.data(), p.w_q.data().data(), q.data(), n, d, c);
        detail::matmul_nt(tok.data(), p.w_k.data().data(), k.data(), n, d, c);
        detail::matmul_nt(tok.data(), p.w_v.data().data(), v.data(), n, d, c);

        Vector<T> attn(n * n);
        detail::matmul_nt(q.data(), k.data(), attn.data(), n, n, d);
        for (std::size_t i = 0; i < n; ++i) {
            T* row = attn.data() + i * n;
            T mx = row[0] / p.tau;
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j] / p.tau);
            T z = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] / p.tau - mx);
                z += row[j];
            }
            for (std::size_t j = 0; j < n; ++j) row[j] /= z;
        }

        Vector<T> mixed(n * d, T(0));
        detail::matmul_nn_acc(attn.data(), v.data(), mixed.data(), n, d, n);
        Vector<T> out(n * c);
        detail::matmul_nt(mixed.data(), p.w_o.data().data(), out.data(), n, c, d);
        for (std::size_t ch = 0; ch < c; ++ch) {
            auto dst = y.plane(b, ch);
            for (std::size_t i = 0; i < n; ++i) dst[i] = out[i * c + ch];
        }
        if (cache != nullptr) {
            cache->q[b] = std::move(q);
            cache->k[b] = std::move(k);
            cache->v[b] = std::move(v);
            cache->attn[b] = std::move(attn);
            cache->mixed[b] = std::move(mixed);
        }
    }
    ensure_finite(y, "toy_self_attention");
    return y;
}

template <class T>
ToySAGrads<T> toy_self_attention_backward(const ToySACache<T>& cache, const ToySAParams<T>& p,
                                          const Tensor4<T>& upstream) {
    if (!cache.input) {
        throw StateError("toy_self_attention_backward: forward cache is empty");
    }
    const Tensor4<T>& x = *cache.input;
    const auto& s = x.shape();
    if (upstream.shape() != s) {
        throw DimensionError("toy_self_attention_backward: upstream shape mismatch");
    }
    const std::size_t n = s.plane();
    const std::size_t c = s.c;
    const std::size_t d = p.dim();
    ToySAGrads<T> g{Tensor4<T>(s), Matrix<T>(d, c), Matrix<T>(d, c), Matrix<T>(d, c), Matrix<T>(c, d)};
    for (std::size_t b = 0; b < s.b; ++b) {
        const Vector<T> tok = detail::tokens(x, b);
        const Vector<T> d_out = detail::tokens(upstream, b);
        const auto& attn = cache.attn[b];

        detail::matmul_tn_acc(d_out.data(), cache.mixed[b].data(), g.w_o.data().data(), c, d, n);
        Vector<T> d_mixed(n * d, T(0));
        detail::matmul_nn_acc(d_out.data(), p.w_o.data().data(), d_mixed.data(), n, d, c);

        Vector<T> d_attn(n * n);
        detail::matmul_nt(d_mixed.data(), cache.v[b].data(), d_attn.data(), n, n, d);
        Vector<T> d_v(n * d, T(0));
        detail::matmul_tn_acc(attn.data(), d_mixed.data(), d_v.data(), n, d, n);

        // d_scores = attn * (d_attn - <d_attn, attn>_row) / tau
        Vector<T> d_scores(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += d_attn[i * n + j] * attn[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                d_scores[i * n + j] = attn[i * n + j] * (d_attn[i * n + j] - dot) / p.tau;
            }
        }
        Vector<T> d_q(n * d, T(0)), d_k(n * d, T(0));
        detail::matmul_nn_acc(d_scores.data(), cache.k[b].data(), d_q.data(), n, d, n);
        detail::matmul_tn_acc(d_scores.data(), cache.q[b].data(), d_k.data(), n, d, n);

        Vector<T> d_tok(n * c, T(0));
        const std::pair<const Vector<T>*, const Matrix<T>*> paths[] = {{&d_q, &p.w_q}, {&d_k, &p.w_k}, {&d_v, &p.w_v}};
        Matrix<T>* grads[] = {&g.w_q, &g.w_k, &g.w_v};
        for (std::size_t t = 0; t < 3; ++t) {
            detail::matmul_nn_acc(paths[t].first->data(), paths[t].second->data().data(), d_tok.data(), n, c, d);
            detail::matmul_tn_acc(paths[t].first->data(), tok.data(), grads[t]->data().data(), d, c, n);
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            auto dst = g.input.plane(b, ch);
            for (std::size_t i = 0; i < n; ++i) dst[i] = d_tok[i * c + ch];
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Uniform operator interface

template <class T>
class Operator {
public:
    virtual ~Operator() = default;
    virtual std::string name() const = 0;
    virtual Tensor4<T> forward(const Tensor4<T>& x) const = 0;
    /// Vector-Jacobian product d<upstream, forward(x)>/dx.
    virtual Tensor4<T> input_gradient(const Tensor4<T>& x, const Tensor4<T>& upstream) const = 0;
};

template <class T>
class IdentityOp final : public Operator<T> {
public:
    std::string name() const override { return "identity"; }
    Tensor4<T> forward(const Tensor4<T>& x) const override { return x; }
    Tensor4<T> input_gradient(const Tensor4<T>&, const Tensor4<T>& upstream) const override { return upstream; }
};

template <class T>
class StaticConvOp final : public Operator<T> {
public:
    explicit StaticConvOp(StaticConvParams<T> p) : p_(std::move(p)) {}
    std::string name() const override { return "static_conv"; }
    Tensor4<T> forward(const Tensor4<T>& x) const override { return static_conv(x, p_); }
    Tensor4<T> input_gradient(const Tensor4<T>& x, const Tensor4<T>& upstream) const override {
        return static_conv_backward(x, p_, upstream).input;
    }
    const StaticConvParams<T>& params() const { return p_; }

private:
    StaticConvParams<T> p_;
};

template <class T>
class StaticDepthwiseOp final : public Operator<T> {
public:
    explicit StaticDepthwiseOp(Tensor4<T> kernels) : kernels_(std::move(kernels)) {}
    std::string name() const override { return "static_dwconv"; }
    Tensor4<T> forward(const Tensor4<T>& x) const override { return static_depthwise(x, kernels_); }
    Tensor4<T> input_gradient(const Tensor4<T>&, const Tensor4<T>& upstream) const override {
        return static_depthwise_input_grad(kernels_, upstream);
    }
    const Tensor4<T>& kernels() const { return kernels_; }

private:
    Tensor4<T> kernels_;
};

template <class T>
class ToySAOp final : public Operator<T> {
public:
    explicit ToySAOp(ToySAParams<T> p) : p_(std::move(p)) {}
    std::string name() const override { return "toy_sa"; }
    Tensor4<T> forward(const Tensor4<T>& x) const override { return toy_self_attention(x, p_); }
    Tensor4<T> input_gradient(const Tensor4<T>& x, const Tensor4<T>& upstream) const override {
        ToySACache<T> cache;
        toy_self_attention(x, p_, &cache);
        return toy_self_attention_backward(cache, p_, upstream).input;
    }

private:
    ToySAParams<T> p_;
};

template <class T>
class ATConvOp final : public Operator<T> {
public:
    ATConvOp(ATConvParams<T> p, ATConvConfig<T> cfg) : p_(std::move(p)), cfg_(std::move(cfg)) {}
    std::string name() const override { return "atconv"; }
    Tensor4<T> forward(const Tensor4<T>& x) const override { return atconv_forward(x, p_, cfg_); }
    Tensor4<T> input_gradient(const Tensor4<T>& x, const Tensor4<T>& upstream) const override {
        ATConvCache<T> cache;
        atconv_forward(x, p_, cfg_, &cache);
        return atconv_backward(cache, p_, cfg_, upstream).input;
    }

private:
    ATConvParams<T> p_;
    ATConvConfig<T> cfg_;
};

// ---------------------------------------------------------------------------
// Jacobian probe

/// d y[0, c*, h, w] / d x[0, :, :, :] for every output channel c*: shape (C_out, C_in, H, W).
/// Only batch element 0 is seeded.
template <class T>
Tensor4<T> conv_jacobian_probe(const Operator<T>& op, const Tensor4<T>& x, std::size_t h, std::size_t w) {
    if (h >= x.height() || w >= x.width()) {
        throw ArgumentError("conv_jacobian_probe: position (" + std::to_string(h) + ", " + std::to_string(w) +
                            ") outside " + std::to_string(x.height()) + "x" + std::to_string(x.width()));
    }
    const Tensor4<T> y = op.forward(x);
    Tensor4<T> jac(y.channels(), x.channels(), x.height(), x.width());
    for (std::size_t co = 0; co < y.channels(); ++co) {
        Tensor4<T> seed(y.shape());
        seed(0, co, h, w) = T(1);
        const Tensor4<T> g = op.input_gradient(x, seed);
        for (std::size_t ci = 0; ci < x.channels(); ++ci) {
            const auto src = g.plane(0, ci);
            std::copy(src.begin(), src.end(), jac.plane(co, ci).begin());
        }
    }
    return jac;
}

} // namespace atconv
