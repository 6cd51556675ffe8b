#pragma once

// A miniature single-stage AttNet: patch embedding, pre-norm blocks
// (ATConv token mixer + GLU channel mixer, two residuals), global average
// pooling and a linear head. Includes AdamW and a small training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atconv/atck.hpp"
#include "atconv/atconv.hpp"
#include "atconv/error.hpp"
#include "atconv/idx.hpp"
#include "atconv/primitives.hpp"
#include "atconv/rng.hpp"
#include "atconv/tensor.hpp"

namespace atconv {

/// A named, shaped view of one parameter tensor.
template <class T>
struct ParamRef {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<T> values;
};

// ---------------------------------------------------------------------------
// GLU channel mixer

template <class T>
struct GluParams {
    Matrix<T> w_a; // E x C, value path
    Vector<T> b_a;
    Matrix<T> w_b; // E x C, gate path
    Vector<T> b_b;
    Matrix<T> w_c; // C x E
    Vector<T> b_c;

    std::size_t channels() const { return w_a.cols(); }
    std::size_t expansion() const { return w_a.rows(); }

    static GluParams zeros(std::size_t c, std::size_t e) {
        if (e < c) {
            throw ArgumentError("glu: expansion " + std::to_string(e) + " is smaller than channels " +
                                std::to_string(c));
        }
        return {Matrix<T>(e, c), Vector<T>(e, T(0)), Matrix<T>(e, c), Vector<T>(e, T(0)), Matrix<T>(c, e),
                Vector<T>(c, T(0))};
    }

    static GluParams init(std::size_t c, std::size_t e, Rng& rng) {
        GluParams p = zeros(c, e);
        const double bc = std::sqrt(1.0 / double(c));
        const double be = std::sqrt(1.0 / double(e));
        for (auto& v : p.w_a.data()) v = T(rng.uniform(-bc, bc));
        for (auto& v : p.w_b.data()) v = T(rng.uniform(-bc, bc));
        for (auto& v : p.w_c.data()) v = T(rng.uniform(-be, be));
        return p;
    }

    void validate() const {
        const std::size_t c = channels(), e = expansion();
        if (e < c || w_b.rows() != e || w_b.cols() != c || w_c.rows() != c || w_c.cols() != e || b_a.size() != e ||
            b_b.size() != e || b_c.size() != c) {
            throw DimensionError("glu: parameter shapes disagree");
        }
    }

    std::vector<ParamRef<T>> refs(const std::string& prefix) {
        const std::size_t c = channels(), e = expansion();
        return {{prefix + "w_a", {e, c}, w_a.data()}, {prefix + "b_a", {e}, b_a},
                {prefix + "w_b", {e, c}, w_b.data()}, {prefix + "b_b", {e}, b_b},
                {prefix + "w_c", {c, e}, w_c.data()}, {prefix + "b_c", {c}, b_c}};
    }
};

template <class T>
struct GluCache {
    Conv1x1Cache<T> a, b, c;
    ActivationCache<T> act;
    std::optional<Tensor4<T>> value, gate;
};

/// Pointwise y = W_c((W_a x + b_a) * gelu(W_b x + b_b)) + b_c at every position.
template <class T>
Tensor4<T> glu_forward(const Tensor4<T>& x, const GluParams<T>& p, GluCache<T>* cache = nullptr) {
    p.validate();
    Tensor4<T> value = conv1x1(x, p.w_a, CSpan<T>(p.b_a), cache ? &cache->a : nullptr);
    Tensor4<T> gate = gelu(conv1x1(x, p.w_b, CSpan<T>(p.b_b), cache ? &cache->b : nullptr), cache ? &cache->act : nullptr);
    Tensor4<T> h(value.shape());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = value[i] * gate[i];
    if (cache != nullptr) {
        cache->value = std::move(value);
        cache->gate = std::move(gate);
    }
    return conv1x1(h, p.w_c, CSpan<T>(p.b_c), cache ? &cache->c : nullptr);
}

/// Single position form.
template <class T>
Vector<T> glu(CSpan<T> x, const GluParams<T>& p) {
    const Tensor4<T> t(Shape4{1, x.size(), 1, 1}, std::vector<T>(x.begin(), x.end()));
    return glu_forward(t, p).data();
}

template <class T>
struct GluGrads {
    Tensor4<T> input;
    GluParams<T> params;
};

template <class T>
GluGrads<T> glu_backward(const GluCache<T>& cache, const GluParams<T>& p, const Tensor4<T>& upstream) {
    if (!cache.value || !cache.gate) {
        throw StateError("glu_backward: forward cache is empty");
    }
    const Tensor4<T>& value = *cache.value;
    const Tensor4<T>& gate = *cache.gate;
    GluGrads<T> g;
    auto cg = conv1x1_backward(cache.c, p.w_c, upstream);
    Tensor4<T> d_value(value.shape()), d_gate(value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
        d_value[i] = cg.input[i] * gate[i];
        d_gate[i] = cg.input[i] * value[i];
    }
    auto ag = conv1x1_backward(cache.a, p.w_a, d_value);
    auto bg = conv1x1_backward(cache.b, p.w_b, gelu_backward(cache.act, d_gate));
    g.input = std::move(ag.input);
    for (std::size_t i = 0; i < g.input.size(); ++i) g.input[i] += bg.input[i];
    g.params = {std::move(ag.weight), std::move(ag.bias), std::move(bg.weight),
                std::move(bg.bias),  std::move(cg.weight), std::move(cg.bias)};
    return g;
}

// ---------------------------------------------------------------------------
// Block

template <class T>
struct BlockParams {
    Vector<T> norm1_gain, norm1_offset;
    ATConvParams<T> atconv;
    Vector<T> norm2_gain, norm2_offset;
    GluParams<T> glu;

    static BlockParams zeros(std::size_t c, std::size_t k, std::size_t e) {
        return {Vector<T>(c, T(0)), Vector<T>(c, T(0)), ATConvParams<T>::zeros(c, k),
                Vector<T>(c, T(0)), Vector<T>(c, T(0)), GluParams<T>::zeros(c, e)};
    }

    static BlockParams init(std::size_t c, std::size_t k, std::size_t e, Rng& rng) {
        BlockParams p{Vector<T>(c, T(1)), Vector<T>(c, T(0)), ATConvParams<T>::init(c, k, rng),
                      Vector<T>(c, T(1)), Vector<T>(c, T(0)), GluParams<T>::init(c, e, rng)};
        return p;
    }

    std::vector<ParamRef<T>> refs(const std::string& prefix) {
        const std::size_t c = atconv.channels, kk = atconv.taps();
        std::vector<ParamRef<T>> out = {{prefix + "norm1_gain", {c}, norm1_gain},
                                        {prefix + "norm1_offset", {c}, norm1_offset}};
        for (auto& [name, view] : atconv.views()) {
            std::vector<std::size_t> shape;
            if (name == "w_gen") shape = {kk, kk};
            else if (view.size() == c * c) shape = {c, c};
            else shape = {c};
            out.push_back({prefix + "atconv." + name, shape, view});
        }
        out.push_back({prefix + "norm2_gain", {c}, norm2_gain});
        out.push_back({prefix + "norm2_offset", {c}, norm2_offset});
        for (auto& r : glu.refs(prefix + "glu.")) out.push_back(r);
        return out;
    }
};

template <class T>
struct BlockCache {
    LayerNormCache<T> ln1, ln2;
    ATConvCache<T> atconv;
    GluCache<T> glu;
};

/// x1 = x + ATConv(LN(x)); out = x1 + GLU(LN(x1)).
template <class T>
Tensor4<T> block_forward(const Tensor4<T>& x, const BlockParams<T>& p, const ATConvConfig<T>& cfg,
                         BlockCache<T>* cache = nullptr) {
    const Tensor4<T> n1 = layer_norm_channels(x, CSpan<T>(p.norm1_gain), CSpan<T>(p.norm1_offset),
                                              T(kLayerNormEps), cache ? &cache->ln1 : nullptr);
    Tensor4<T> x1 = atconv_forward(n1, p.atconv, cfg, cache ? &cache->atconv : nullptr);
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += x[i];
    const Tensor4<T> n2 = layer_norm_channels(x1, CSpan<T>(p.norm2_gain), CSpan<T>(p.norm2_offset),
                                              T(kLayerNormEps), cache ? &cache->ln2 : nullptr);
    Tensor4<T> out = glu_forward(n2, p.glu, cache ? &cache->glu : nullptr);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x1[i];
    return out;
}

template <class T>
struct BlockGrads {
    Tensor4<T> input;
    BlockParams<T> params;
};

template <class T>
BlockGrads<T> block_backward(const BlockCache<T>& cache, const BlockParams<T>& p, const ATConvConfig<T>& cfg,
                             const Tensor4<T>& upstream) {
    BlockGrads<T> g;
    auto gg = glu_backward(cache.glu, p.glu, upstream);
    auto l2 = layer_norm_channels_backward(cache.ln2, CSpan<T>(p.norm2_gain), gg.input);
    Tensor4<T> d_x1 = upstream;
    for (std::size_t i = 0; i < d_x1.size(); ++i) d_x1[i] += l2.input[i];

    auto ag = atconv_backward(cache.atconv, p.atconv, cfg, d_x1);
    auto l1 = layer_norm_channels_backward(cache.ln1, CSpan<T>(p.norm1_gain), ag.input);
    g.input = d_x1;
    for (std::size_t i = 0; i < g.input.size(); ++i) g.input[i] += l1.input[i];

    g.params.norm1_gain = std::move(l1.gain);
    g.params.norm1_offset = std::move(l1.offset);
    g.params.norm2_gain = std::move(l2.gain);
    g.params.norm2_offset = std::move(l2.offset);
    g.params.glu = std::move(gg.params);
    g.params.atconv = ATConvParams<T>::zeros(p.atconv.channels, p.atconv.kernel);
    auto dst = g.params.atconv.views();
    auto src = ag.views();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        std::copy(src[i].second.begin(), src[i].second.end(), dst[i].second.begin());
    }
    return g;
}

// ---------------------------------------------------------------------------
// Patch embedding: strided convolution, kernel k >= stride, zero padding (k - stride) / 2

template <class T>
Tensor4<T> patch_embed(const Tensor4<T>& x, const Tensor4<T>& w, CSpan<T> bias, std::size_t stride) {
    const auto& s = x.shape();
    const std::size_t k = w.height();
    if (w.channels() != s.c || w.width() != k || bias.size() != w.batch()) {
        throw DimensionError("patch_embed: weights " + w.shape().str() + " do not fit input " + s.str());
    }
    if (stride == 0 || k < stride || (k - stride) % 2 != 0 || s.h % stride != 0 || s.w % stride != 0) {
        throw DimensionError("patch_embed: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                             " with kernel " + std::to_string(k) + " does not tile at stride " +
                             std::to_string(stride));
    }
    const long pad = long(k - stride) / 2;
    const std::size_t oh = s.h / stride, ow = s.w / stride;
    Tensor4<T> y(s.b, w.batch(), oh, ow);
    for (std::size_t b = 0; b < s.b; ++b)
        for (std::size_t o = 0; o < w.batch(); ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    T acc = bias[o];
                    for (std::size_t c = 0; c < s.c; ++c)
                        for (std::size_t u = 0; u < k; ++u) {
                            const long r = long(i * stride + u) - pad;
                            if (r < 0 || r >= long(s.h)) continue;
                            for (std::size_t v = 0; v < k; ++v) {
                                const long q = long(j * stride + v) - pad;
                                if (q < 0 || q >= long(s.w)) continue;
                                acc += w(o, c, u, v) * x(b, c, std::size_t(r), std::size_t(q));
                            }
                        }
                    y(b, o, i, j) = acc;
                }
    count_flops(2ULL * y.size() * s.c * k * k);
    return y;
}

template <class T>
struct PatchEmbedGrads {
    Tensor4<T> input;
    Tensor4<T> weight;
    Vector<T> bias;
};

template <class T>
PatchEmbedGrads<T> patch_embed_backward(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>& upstream,
                                        std::size_t stride) {
    const auto& s = x.shape();
    const std::size_t k = w.height();
    const long pad = long(k - stride) / 2;
    PatchEmbedGrads<T> g{Tensor4<T>(s), Tensor4<T>(w.shape()), Vector<T>(w.batch(), T(0))};
    for (std::size_t b = 0; b < s.b; ++b)
        for (std::size_t o = 0; o < w.batch(); ++o)
            for (std::size_t i = 0; i < upstream.height(); ++i)
                for (std::size_t j = 0; j < upstream.width(); ++j) {
                    const T up = upstream(b, o, i, j);
                    g.bias[o] += up;
                    for (std::size_t c = 0; c < s.c; ++c)
                        for (std::size_t u = 0; u < k; ++u) {
                            const long r = long(i * stride + u) - pad;
                            if (r < 0 || r >= long(s.h)) continue;
                            for (std::size_t v = 0; v < k; ++v) {
                                const long q = long(j * stride + v) - pad;
                                if (q < 0 || q >= long(s.w)) continue;
                                g.weight(o, c, u, v) += up * x(b, c, std::size_t(r), std::size_t(q));
                                g.input(b, c, std::size_t(r), std::size_t(q)) += up * w(o, c, u, v);
                            }
                        }
                }
    return g;
}

// ---------------------------------------------------------------------------
// Model

struct MicroConfig {
    std::size_t in_channels = 1;
    std::size_t image = 28;
    std::size_t patch = 4;        // stem stride
    std::size_t stem_kernel = 8;  // stem kernel, overlapping when larger than patch
    std::size_t channels = 32;
    std::size_t blocks = 2;
    std::size_t kernel = 7;
    std::size_t classes = 10;
    std::size_t expansion = 4; // E = expansion * C
    KernelMod kernel_mod = KernelMod::dkm;

    void validate() const {
        if (blocks == 0) throw ArgumentError("micro model needs at least one block");
        if (patch == 0 || image % patch != 0) throw ArgumentError("image size must be a multiple of the patch size");
        if (stem_kernel < patch || (stem_kernel - patch) % 2 != 0) {
            throw ArgumentError("stem kernel must be the patch size plus an even overlap");
        }
        if (image / patch < kernel) throw ArgumentError("token grid is smaller than the kernel");
        if (expansion == 0 || channels == 0 || classes < 2) throw ArgumentError("invalid micro model sizes");
        check_kernel_size(static_cast<long>(kernel));
    }

    template <class T>
    ATConvConfig<T> atconv_config() const {
        ATConvConfig<T> cfg = ATConvConfig<T>::full();
        cfg.kernel_mod = kernel_mod;
        return cfg;
    }
};

template <class T>
struct MicroParams {
    Tensor4<T> embed_w; // C x in x k x k
    Vector<T> embed_b;
    std::vector<BlockParams<T>> blocks;
    Matrix<T> head_w; // classes x C
    Vector<T> head_b;

    static MicroParams zeros(const MicroConfig& cfg) {
        MicroParams p;
        p.embed_w = Tensor4<T>(cfg.channels, cfg.in_channels, cfg.stem_kernel, cfg.stem_kernel);
        p.embed_b.assign(cfg.channels, T(0));
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            p.blocks.push_back(BlockParams<T>::zeros(cfg.channels, cfg.kernel, cfg.expansion * cfg.channels));
        }
        p.head_w = Matrix<T>(cfg.classes, cfg.channels);
        p.head_b.assign(cfg.classes, T(0));
        return p;
    }

    /// The head starts at zero, so initial logits are uniform.
    static MicroParams init(const MicroConfig& cfg, Rng& rng) {
        cfg.validate();
        MicroParams p = zeros(cfg);
        const double bound = std::sqrt(1.0 / double(cfg.in_channels * cfg.stem_kernel * cfg.stem_kernel));
        for (auto& v : p.embed_w.data()) v = T(rng.uniform(-bound, bound));
        for (auto& b : p.blocks) b = BlockParams<T>::init(cfg.channels, cfg.kernel, cfg.expansion * cfg.channels, rng);
        return p;
    }

    std::vector<ParamRef<T>> refs() {
        const auto& s = embed_w.shape();
        std::vector<ParamRef<T>> out = {{"embed_w", {s.b, s.c, s.h, s.w}, embed_w.data()},
                                        {"embed_b", {embed_b.size()}, embed_b}};
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            for (auto& r : blocks[i].refs("blocks." + std::to_string(i) + ".")) out.push_back(r);
        }
        out.push_back({"head_w", {head_w.rows(), head_w.cols()}, head_w.data()});
        out.push_back({"head_b", {head_b.size()}, head_b});
        return out;
    }

    std::size_t count() {
        std::size_t n = 0;
        for (const auto& r : refs()) n += r.values.size();
        return n;
    }
};

template <class T>
struct MicroCache {
    std::optional<Tensor4<T>> input;
    std::vector<Tensor4<T>> block_inputs;
    std::vector<BlockCache<T>> blocks;
    std::optional<Tensor4<T>> features;
    Vector<T> pooled; // B x C
};

/// Logits, B x classes, row-major.
template <class T>
Vector<T> micro_forward(const Tensor4<T>& x, const MicroParams<T>& p, const MicroConfig& cfg,
                        MicroCache<T>* cache = nullptr) {
    const ATConvConfig<T> acfg = cfg.atconv_config<T>();
    Tensor4<T> h = patch_embed(x, p.embed_w, CSpan<T>(p.embed_b), cfg.patch);
    if (cache != nullptr) {
        cache->input = x;
        cache->block_inputs.clear();
        cache->blocks.assign(p.blocks.size(), {});
    }
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        if (cache != nullptr) cache->block_inputs.push_back(h);
        h = block_forward(h, p.blocks[i], acfg, cache ? &cache->blocks[i] : nullptr);
    }
    const std::size_t B = h.batch(), C = h.channels(), hw = h.height() * h.width();
    Vector<T> pooled(B * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (T v : h.plane(b, c)) s += v;
            pooled[b * C + c] = s / T(hw);
        }
    Vector<T> logits(B * cfg.classes);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < cfg.classes; ++k) {
            T acc = p.head_b[k];
            for (std::size_t c = 0; c < C; ++c) acc += p.head_w(k, c) * pooled[b * C + c];
            logits[b * cfg.classes + k] = acc;
        }
    if (cache != nullptr) {
        cache->features = std::move(h);
        cache->pooled = pooled;
    }
    return logits;
}

template <class T>
struct CrossEntropy {
    T loss = T(0); // mean over the batch
    Vector<T> d_logits;
    std::size_t correct = 0;
};

/// Softmax cross-entropy with log-sum-exp; d_logits is the gradient of the mean loss.
template <class T>
CrossEntropy<T> cross_entropy(CSpan<T> logits, std::span<const std::uint8_t> labels, std::size_t classes) {
    const std::size_t B = labels.size();
    if (logits.size() != B * classes || B == 0) {
        throw DimensionError("cross_entropy: logits do not match labels");
    }
    CrossEntropy<T> r;
    r.d_logits.resize(logits.size());
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const T* z = logits.data() + b * classes;
        const T mx = *std::max_element(z, z + classes);
        T sum = T(0);
        for (std::size_t k = 0; k < classes; ++k) sum += std::exp(z[k] - mx);
        const T lse = mx + std::log(sum);
        total += double(lse - z[labels[b]]);
        if (std::size_t(std::max_element(z, z + classes) - z) == labels[b]) ++r.correct;
        for (std::size_t k = 0; k < classes; ++k) {
            const T prob = std::exp(z[k] - lse);
            r.d_logits[b * classes + k] = (prob - (k == labels[b] ? T(1) : T(0))) / T(B);
        }
    }
    r.loss = T(total / double(B));
    return r;
}

template <class T>
MicroParams<T> micro_backward(const MicroCache<T>& cache, const MicroParams<T>& p, const MicroConfig& cfg,
                              CSpan<T> d_logits) {
    if (!cache.input || !cache.features) {
        throw StateError("micro_backward: forward cache is empty");
    }
    const ATConvConfig<T> acfg = cfg.atconv_config<T>();
    const Tensor4<T>& feat = *cache.features;
    const std::size_t B = feat.batch(), C = feat.channels(), hw = feat.height() * feat.width();
    MicroParams<T> g = MicroParams<T>::zeros(cfg);

    Tensor4<T> d_h(feat.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < cfg.classes; ++k) {
            const T dz = d_logits[b * cfg.classes + k];
            g.head_b[k] += dz;
            for (std::size_t c = 0; c < C; ++c) g.head_w(k, c) += dz * cache.pooled[b * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) {
            T dp = T(0);
            for (std::size_t k = 0; k < cfg.classes; ++k) dp += d_logits[b * cfg.classes + k] * p.head_w(k, c);
            const T share = dp / T(hw);
            for (auto& v : d_h.plane(b, c)) v = share;
        }
    }
    for (std::size_t i = p.blocks.size(); i-- > 0;) {
        auto bg = block_backward(cache.blocks[i], p.blocks[i], acfg, d_h);
        d_h = std::move(bg.input);
        g.blocks[i] = std::move(bg.params);
    }
    auto eg = patch_embed_backward(*cache.input, p.embed_w, d_h, cfg.patch);
    g.embed_w = std::move(eg.weight);
    g.embed_b = std::move(eg.bias);
    return g;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <class T>
struct AdamState {
    std::vector<Vector<T>> m, v;
    long step = 0;
};

/// Decoupled weight decay, bias-corrected moments.
template <class T>
void adam_step(const std::vector<std::span<T>>& params, const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, const AdamHyper& hyper) {
    if (params.size() != grads.size()) {
        throw DimensionError("adam_step: parameter and gradient lists differ in length");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() != params[i].size()) throw DimensionError("adam_step: gradient size mismatch");
        ensure_finite(grads[i], "adam_step gradient");
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), T(0));
            state.v.emplace_back(p.size(), T(0));
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(hyper.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, double(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = double(grads[i][j]);
            double w = double(params[i][j]);
            w -= hyper.lr * hyper.weight_decay * w;
            m[j] = T(hyper.beta1 * double(m[j]) + (1.0 - hyper.beta1) * g);
            v[j] = T(hyper.beta2 * double(v[j]) + (1.0 - hyper.beta2) * g * g);
            const double mhat = double(m[j]) / bc1;
            const double vhat = double(v[j]) / bc2;
            w -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
            params[i][j] = T(w);
        }
    }
}

template <class T>
void adam_step(MicroParams<T>& params, MicroParams<T>& grads, AdamState<T>& state, const AdamHyper& hyper) {
    std::vector<std::span<T>> ps;
    std::vector<std::span<const T>> gs;
    for (auto& r : params.refs()) ps.push_back(r.values);
    for (auto& r : grads.refs()) gs.push_back(r.values);
    adam_step(ps, gs, state, hyper);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
std::vector<AtckEntry> micro_to_atck(MicroParams<T>& p, const MicroConfig& cfg) {
    std::vector<AtckEntry> out;
    out.push_back(make_entry<double>("config", {10},
                                     {double(cfg.in_channels), double(cfg.image), double(cfg.patch),
                                      double(cfg.channels), double(cfg.blocks), double(cfg.kernel),
                                      double(cfg.classes), double(cfg.expansion), double(int(cfg.kernel_mod)),
                                      double(cfg.stem_kernel)}));
    for (auto& r : p.refs()) {
        out.push_back(make_entry<T>(r.name, r.shape, std::vector<T>(r.values.begin(), r.values.end())));
    }
    return out;
}

template <class T>
std::pair<MicroConfig, MicroParams<T>> micro_from_atck(const std::vector<AtckEntry>& entries) {
    const auto c = entry_values<double>(find_entry(entries, "config"), 10);
    MicroConfig cfg;
    cfg.in_channels = std::size_t(c[0]);
    cfg.image = std::size_t(c[1]);
    cfg.patch = std::size_t(c[2]);
    cfg.channels = std::size_t(c[3]);
    cfg.blocks = std::size_t(c[4]);
    cfg.kernel = std::size_t(c[5]);
    cfg.classes = std::size_t(c[6]);
    cfg.expansion = std::size_t(c[7]);
    cfg.kernel_mod = static_cast<KernelMod>(int(c[8]));
    cfg.stem_kernel = std::size_t(c[9]);
    cfg.validate();
    MicroParams<T> p = MicroParams<T>::zeros(cfg);
    for (auto& r : p.refs()) {
        const auto vals = entry_values<T>(find_entry(entries, r.name), r.values.size());
        std::copy(vals.begin(), vals.end(), r.values.begin());
    }
    return {cfg, std::move(p)};
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch = 16;
    AdamHyper adam{2e-3, 0.9, 0.999, 1e-8, 0.05};
    std::uint64_t seed = 42;
    std::string checkpoint;        // written after every epoch when non-empty
    double stop_at_accuracy = 2.0; // stop once test accuracy reaches this (default: never)
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double wall_ms = 0.0;
};

template <class T>
Tensor4<T> gather_batch(const IdxDataset& ds, std::span<const std::size_t> idx, std::vector<std::uint8_t>& labels) {
    Tensor4<T> x(idx.size(), 1, ds.rows, ds.cols);
    labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* img = ds.image(idx[i]);
        std::copy(img, img + ds.image_size(), x.plane(i, 0).begin());
        labels[i] = ds.labels[idx[i]];
    }
    return x;
}

template <class T>
double evaluate(const MicroParams<T>& p, const MicroConfig& cfg, const IdxDataset& ds, std::size_t batch = 100) {
    std::vector<std::size_t> idx(ds.count);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::uint8_t> labels;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < ds.count; s += batch) {
        const std::span<const std::size_t> chunk(idx.data() + s, std::min(batch, ds.count - s));
        const auto x = gather_batch<T>(ds, chunk, labels);
        const auto logits = micro_forward(x, p, cfg);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            const T* z = logits.data() + b * cfg.classes;
            if (std::size_t(std::max_element(z, z + cfg.classes) - z) == labels[b]) ++correct;
        }
    }
    return ds.count == 0 ? 0.0 : double(correct) / double(ds.count);
}

/// One optimizer step on a batch; returns the batch loss and correct count.
template <class T>
CrossEntropy<T> train_step(MicroParams<T>& p, const MicroConfig& cfg, AdamState<T>& state, const AdamHyper& hyper,
                           const Tensor4<T>& x, std::span<const std::uint8_t> labels) {
    MicroCache<T> cache;
    const auto logits = micro_forward(x, p, cfg, &cache);
    auto ce = cross_entropy<T>(logits, labels, cfg.classes);
    if (!std::isfinite(double(ce.loss))) {
        throw NumericError("training loss is not finite");
    }
    auto g = micro_backward(cache, p, cfg, CSpan<T>(ce.d_logits));
    adam_step(p, g, state, hyper);
    return ce;
}

/// Seeded shuffling, one metrics record per epoch. A non-finite loss aborts with
/// the last good parameters written to `opt.checkpoint` (if set).
template <class T>
std::vector<EpochMetrics> train(MicroParams<T>& p, const MicroConfig& cfg, const IdxDataset& train_set,
                                const IdxDataset* test_set, const TrainOptions& opt,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    if (opt.batch == 0) throw ArgumentError("train: batch size must be positive");
    if (train_set.count == 0) throw ArgumentError("train: empty training set");
    Rng rng(opt.seed ^ 0x5bd1e995ULL);
    AdamState<T> state;
    std::vector<std::size_t> order(train_set.count);
    std::iota(order.begin(), order.end(), 0);
    std::vector<EpochMetrics> history;
    std::vector<std::uint8_t> labels;
    MicroParams<T> last_good = p;

    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t s = 0; s < order.size(); s += opt.batch) {
            const std::span<const std::size_t> chunk(order.data() + s, std::min(opt.batch, order.size() - s));
            const auto x = gather_batch<T>(train_set, chunk, labels);
            try {
                const auto ce = train_step(p, cfg, state, opt.adam, x, labels);
                loss_sum += double(ce.loss) * double(chunk.size());
                correct += ce.correct;
            } catch (const NumericError& e) {
                p = last_good;
                if (!opt.checkpoint.empty()) write_atck_file(opt.checkpoint, micro_to_atck(p, cfg));
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                   (opt.checkpoint.empty() ? "" : "; last good checkpoint in " + opt.checkpoint));
            }
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / double(order.size());
        m.train_acc = double(correct) / double(order.size());
        m.test_acc = test_set != nullptr ? evaluate(p, cfg, *test_set) : 0.0;
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        last_good = p;
        if (!opt.checkpoint.empty()) write_atck_file(opt.checkpoint, micro_to_atck(p, cfg));
        history.push_back(m);
        if (on_epoch) on_epoch(m);
        if (m.test_acc >= opt.stop_at_accuracy) break;
    }
    return history;
}

// ---------------------------------------------------------------------------
// Parameter counts of four-stage backbones built from these blocks

struct StagePreset {
    std::string name;
    std::vector<std::size_t> depths;
    std::vector<std::size_t> widths;
    double published_params_m;
};

inline std::vector<StagePreset> backbone_presets() {
    return {{"AttNet-T1", {2, 3, 12, 3}, {48, 96, 224, 384}, 13.7},
            {"AttNet-T2", {3, 3, 16, 3}, {64, 128, 288, 512}, 27.0},
            {"AttNet-T3", {4, 4, 26, 4}, {72, 144, 320, 576}, 49.1},
            {"AttNet-T4", {5, 5, 28, 5}, {96, 192, 384, 768}, 87.3}};
}

/// Stem: 4x4 patch conv from RGB. Between stages: 2x2 stride-2 conv. Head: 1000 classes.
inline std::size_t preset_param_count(const StagePreset& s, std::size_t kernel = 3, std::size_t expansion = 4,
                                      std::size_t classes = 1000) {
    const std::size_t kk = kernel * kernel;
    std::size_t total = s.widths[0] * 3 * 16 + s.widths[0];
    for (std::size_t i = 0; i < s.depths.size(); ++i) {
        const std::size_t c = s.widths[i], e = expansion * c;
        const std::size_t atconv = 3 * (c * c + c) + kk * kk + c;
        const std::size_t glu = 2 * (e * c + e) + c * e + c;
        total += s.depths[i] * (4 * c + atconv + glu);
        if (i + 1 < s.depths.size()) total += s.widths[i + 1] * c * 4 + s.widths[i + 1];
    }
    const std::size_t last = s.widths.back();
    return total + 2 * last + classes * last + classes;
}

} // namespace atconv
