#pragma once

// Central finite-difference sweep over every differentiable piece, in f64.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "atconv/atconv.hpp"
#include "atconv/baselines.hpp"
#include "atconv/micro.hpp"
#include "atconv/primitives.hpp"
#include "json.hpp"

namespace atconv {

struct GradCheckEntry {
    std::string module;
    std::string tensor;
    std::size_t entries = 0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::uint64_t seed = 0;
    double h = 1e-3;
    double tolerance = 1e-4;
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.rel_error);
        return m;
    }
    bool pass() const { return max_rel_error() < tolerance; }

    /// Worst error per module.
    double module_error(const std::string& module) const {
        double m = 0.0;
        for (const auto& e : entries)
            if (e.module == module) m = std::max(m, e.rel_error);
        return m;
    }
};

inline nlohmann::json to_json(const GradCheckReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : r.entries) {
        rows.push_back({{"module", e.module}, {"tensor", e.tensor}, {"entries", e.entries}, {"rel_error", e.rel_error}});
    }
    return {{"seed", r.seed},
            {"h", r.h},
            {"tolerance", r.tolerance},
            {"max_rel_error", r.max_rel_error()},
            {"pass", r.pass()},
            {"error_measure", "max|g_analytic - g_fd| / max(1, max|g_fd|)"},
            {"checks", rows}};
}

/// ||analytic - fd||_inf / max(1, ||fd||_inf), with fd from central differences
/// of `loss` over every entry of `values` (perturbed in place, then restored).
inline double fd_rel_error(std::span<double> values, std::span<const double> analytic,
                           const std::function<double()>& loss, double h) {
    if (analytic.size() != values.size()) {
        throw DimensionError("fd_rel_error: gradient has " + std::to_string(analytic.size()) + " entries, tensor has " +
                             std::to_string(values.size()));
    }
    double diff = 0.0, scale = 1.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double keep = values[i];
        values[i] = keep + h;
        const double up = loss();
        values[i] = keep - h;
        const double down = loss();
        values[i] = keep;
        const double fd = (up - down) / (2.0 * h);
        diff = std::max(diff, std::abs(analytic[i] - fd));
        scale = std::max(scale, std::abs(fd));
    }
    return diff / scale;
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

class GradSweep {
public:
    GradSweep(GradCheckReport& report, std::string module, std::function<double()> loss)
        : report_(report), module_(std::move(module)), loss_(std::move(loss)) {}

    void check(const std::string& tensor, std::span<double> values, std::span<const double> analytic) {
        report_.entries.push_back({module_, tensor, values.size(), fd_rel_error(values, analytic, loss_, report_.h)});
    }

private:
    GradCheckReport& report_;
    std::string module_;
    std::function<double()> loss_;
};

} // namespace detail

/// Checks input and every parameter of one ATConv configuration.
inline void gradcheck_atconv(GradCheckReport& report, const std::string& module, Tensor4<double> x,
                             ATConvParams<double> p, ATConvConfig<double> cfg, Rng& rng) {
    const auto r = random_tensor<double>(x.shape(), rng);
    ATConvCache<double> cache;
    atconv_forward(x, p, cfg, &cache);
    auto g = atconv_backward(cache, p, cfg, r);
    detail::GradSweep sweep(report, module, [&] { return detail::dot(atconv_forward(x, p, cfg).data(), r.data()); });
    sweep.check("input", x.data(), g.input.data());
    auto pv = p.views();
    auto gv = g.views();
    for (std::size_t i = 0; i < pv.size(); ++i) sweep.check(pv[i].first, pv[i].second, gv[i].second);
    if (cfg.static_kernel) sweep.check("static_kernel", cfg.static_kernel->data(), g.static_kernel.data());
}

/// Small random parameters with non-zero biases and gamma, so every path carries gradient.
inline ATConvParams<double> gradcheck_atconv_params(std::size_t c, std::size_t k, Rng& rng) {
    auto p = ATConvParams<double>::init(c, k, rng);
    for (auto* v : {&p.w_f_bias, &p.gamma, &p.w_value_bias, &p.w_out_bias}) {
        for (auto& e : *v) e = rng.uniform(-0.5, 0.5);
    }
    return p;
}

/// Gradient check of one roadmap stage at shape (2, 4, 6, 6), K = 3.
inline GradCheckReport gradcheck_stage(const RoadmapStage& stage, std::uint64_t seed, double h = 1e-3) {
    GradCheckReport report;
    report.seed = seed;
    report.h = h;
    Rng rng(seed);
    const auto x = random_tensor<double>({2, 4, 6, 6}, rng);
    const auto p = gradcheck_atconv_params(4, 3, rng);
    const auto cfg = make_config<double>(stage, random_matrix<double>(4, 9, rng));
    gradcheck_atconv(report, "atconv[" + stage.name + "]", x, p, cfg, rng);
    return report;
}

/// Every primitive, the full operator and each roadmap stage, the baselines,
/// GLU, one block and a 2-block micro model.
inline GradCheckReport gradcheck_suite(std::uint64_t seed, double h = 1e-3) {
    GradCheckReport report;
    report.seed = seed;
    report.h = h;
    Rng rng(seed);

    {
        auto x = random_tensor<double>({2, 4, 6, 6}, rng);
        auto w = random_matrix<double>(3, 4, rng);
        auto b = random_vector<double>(3, rng);
        const auto r = random_tensor<double>({2, 3, 6, 6}, rng);
        Conv1x1Cache<double> cache;
        conv1x1(x, w, CSpan<double>(b), &cache);
        const auto g = conv1x1_backward(cache, w, r);
        detail::GradSweep s(report, "conv1x1",
                            [&] { return detail::dot(conv1x1(x, w, CSpan<double>(b)).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        s.check("weight", w.data(), g.weight.data());
        s.check("bias", b, g.bias);
    }
    {
        auto x = random_tensor<double>({2, 3, 6, 5}, rng);
        const auto r = random_tensor<double>({2, 3, 3, 3}, rng);
        PoolCache<double> cache;
        adaptive_avg_pool(x, 3, &cache);
        const auto g = adaptive_avg_pool_backward(cache, r);
        detail::GradSweep s(report, "adaptive_avg_pool",
                            [&] { return detail::dot(adaptive_avg_pool(x, 3).data(), r.data()); });
        s.check("input", x.data(), g.data());
    }
    {
        auto v = random_vector<double>(5, rng);
        auto w = random_matrix<double>(3, 5, rng);
        auto b = random_vector<double>(3, rng);
        const auto r = random_vector<double>(3, rng);
        LinearCache<double> cache;
        linear<double>(v, w, b, &cache);
        const auto g = linear_backward<double>(cache, w, r);
        detail::GradSweep s(report, "linear", [&] { return detail::dot(linear<double>(v, w, b), r); });
        s.check("input", v, g.input);
        s.check("weight", w.data(), g.weight.data());
        s.check("bias", b, g.bias);
    }
    {
        auto x = random_tensor<double>({2, 3, 4, 4}, rng, -3.0, 3.0);
        const auto r = random_tensor<double>({2, 3, 4, 4}, rng);
        ActivationCache<double> gc, sc;
        gelu(x, &gc);
        sigmoid(x, &sc);
        const auto gg = gelu_backward(gc, r);
        const auto sg = sigmoid_backward(sc, r);
        detail::GradSweep(report, "gelu", [&] { return detail::dot(gelu(x).data(), r.data()); })
            .check("input", x.data(), gg.data());
        detail::GradSweep(report, "sigmoid", [&] { return detail::dot(sigmoid(x).data(), r.data()); })
            .check("input", x.data(), sg.data());
    }
    {
        auto z = random_vector<double>(6, rng, -2.0, 2.0);
        const auto r = random_vector<double>(6, rng);
        const double tau = 1.7;
        const auto y = softmax<double>(z, tau);
        const auto g = softmax_backward<double>(y, r, tau);
        detail::GradSweep(report, "softmax", [&] { return detail::dot(softmax<double>(z, tau), r); })
            .check("input", z, g);
    }
    {
        auto x = random_tensor<double>({2, 4, 3, 3}, rng, -3.0, 3.0);
        auto gain = random_vector<double>(4, rng, 0.5, 1.5);
        auto offset = random_vector<double>(4, rng);
        const auto r = random_tensor<double>({2, 4, 3, 3}, rng);
        LayerNormCache<double> cache;
        layer_norm_channels(x, CSpan<double>(gain), CSpan<double>(offset), kLayerNormEps, &cache);
        const auto g = layer_norm_channels_backward(cache, CSpan<double>(gain), r);
        detail::GradSweep s(report, "layer_norm", [&] {
            return detail::dot(layer_norm_channels(x, CSpan<double>(gain), CSpan<double>(offset)).data(), r.data());
        });
        s.check("input", x.data(), g.input.data());
        s.check("gain", gain, g.gain);
        s.check("offset", offset, g.offset);
    }
    {
        auto x = random_tensor<double>({2, 4, 6, 6}, rng);
        auto p = gradcheck_atconv_params(4, 3, rng);
        const auto r = random_tensor<double>({2, 4, 3, 3}, rng);
        C2KCache<double> cache;
        c2k(x, p, &cache);
        const auto g = c2k_backward(cache, p, r);
        detail::GradSweep s(report, "c2k", [&] { return detail::dot(c2k(x, p).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        s.check("w_f", p.w_f.data(), g.w_f.data());
        s.check("w_f_bias", p.w_f_bias, g.w_f_bias);
        s.check("w_gen", p.w_gen.data(), g.w_gen.data());
    }
    for (std::size_t k : {1, 3, 5}) {
        auto raw = random_tensor<double>({2, 3, k, k}, rng);
        auto lambda = random_vector<double>(3, rng, 0.0, 1.0);
        const auto r = random_tensor<double>({2, 3, k, k}, rng);
        const auto g = dkm_backward<double>(raw, lambda, r);
        detail::GradSweep s(report, "dkm[K=" + std::to_string(k) + "]",
                            [&] { return detail::dot(dkm_with_lambda<double>(raw, lambda).alpha.data(), r.data()); });
        s.check("raw", raw.data(), g.raw.data());
        s.check("lambda", lambda, g.lambda);
    }
    {
        auto raw = random_tensor<double>({2, 3, 3, 3}, rng, -2.0, 2.0);
        const auto r = random_tensor<double>({2, 3, 3, 3}, rng);
        const auto gs = kernel_mod_softmax_backward(kernel_mod_softmax(raw), r);
        const auto gc = kernel_mod_central_diff_backward(r);
        detail::GradSweep(report, "kernel_softmax",
                          [&] { return detail::dot(kernel_mod_softmax(raw).alpha.data(), r.data()); })
            .check("raw", raw.data(), gs.data());
        detail::GradSweep(report, "kernel_central_diff",
                          [&] { return detail::dot(kernel_mod_central_diff(raw).alpha.data(), r.data()); })
            .check("raw", raw.data(), gc.data());
    }
    {
        auto v = random_tensor<double>({2, 3, 5, 6}, rng);
        DynamicKernel<double> k{random_tensor<double>({2, 3, 3, 3}, rng)};
        const auto r = random_tensor<double>({2, 3, 5, 6}, rng);
        const auto g = dyn_depthwise_backward(v, k, r);
        detail::GradSweep s(report, "dyn_depthwise", [&] { return detail::dot(dyn_depthwise(v, k).data(), r.data()); });
        s.check("values", v.data(), g.values.data());
        s.check("alpha", k.alpha.data(), g.alpha.data());
    }
    {
        const auto x = random_tensor<double>({2, 4, 6, 6}, rng);
        gradcheck_atconv(report, "atconv", x, gradcheck_atconv_params(4, 3, rng), ATConvConfig<double>::full(), rng);
        const auto x5 = random_tensor<double>({1, 3, 6, 6}, rng);
        gradcheck_atconv(report, "atconv[K=5]", x5, gradcheck_atconv_params(3, 5, rng), ATConvConfig<double>::full(),
                         rng);
        for (const auto& stage : roadmap_stages()) {
            const auto xs = random_tensor<double>({2, 4, 6, 6}, rng);
            const auto p = gradcheck_atconv_params(4, 3, rng);
            gradcheck_atconv(report, "atconv[" + stage.name + "]", xs, p,
                             make_config<double>(stage, random_matrix<double>(4, 9, rng)), rng);
        }
    }
    {
        auto x = random_tensor<double>({2, 3, 5, 5}, rng);
        auto p = StaticConvParams<double>::init(2, 3, 3, rng);
        p.bias = random_vector<double>(2, rng);
        const auto r = random_tensor<double>({2, 2, 5, 5}, rng);
        const auto g = static_conv_backward(x, p, r);
        detail::GradSweep s(report, "static_conv", [&] { return detail::dot(static_conv(x, p).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        s.check("weights", p.weights.data(), g.weights.data());
        s.check("bias", p.bias, g.bias);
    }
    {
        auto x = random_tensor<double>({2, 4, 3, 3}, rng);
        auto p = ToySAParams<double>::init(4, 4, rng);
        const auto r = random_tensor<double>({2, 4, 3, 3}, rng);
        ToySACache<double> cache;
        toy_self_attention(x, p, &cache);
        const auto g = toy_self_attention_backward(cache, p, r);
        detail::GradSweep s(report, "toy_sa", [&] { return detail::dot(toy_self_attention(x, p).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        s.check("w_q", p.w_q.data(), g.w_q.data());
        s.check("w_k", p.w_k.data(), g.w_k.data());
        s.check("w_v", p.w_v.data(), g.w_v.data());
        s.check("w_o", p.w_o.data(), g.w_o.data());
    }
    {
        auto x = random_tensor<double>({2, 3, 3, 2}, rng);
        auto p = GluParams<double>::init(3, 6, rng);
        for (auto* v : {&p.b_a, &p.b_b, &p.b_c})
            for (auto& e : *v) e = rng.uniform(-0.5, 0.5);
        const auto r = random_tensor<double>({2, 3, 3, 2}, rng);
        GluCache<double> cache;
        glu_forward(x, p, &cache);
        auto g = glu_backward(cache, p, r);
        detail::GradSweep s(report, "glu", [&] { return detail::dot(glu_forward(x, p).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        auto pr = p.refs("");
        auto gr = g.params.refs("");
        for (std::size_t i = 0; i < pr.size(); ++i) s.check(pr[i].name, pr[i].values, gr[i].values);
    }
    {
        auto x = random_tensor<double>({2, 4, 6, 6}, rng, -3.0, 3.0);
        auto p = BlockParams<double>::init(4, 3, 16, rng);
        p.atconv = gradcheck_atconv_params(4, 3, rng);
        const auto cfg = ATConvConfig<double>::full();
        const auto r = random_tensor<double>({2, 4, 6, 6}, rng);
        BlockCache<double> cache;
        block_forward(x, p, cfg, &cache);
        auto g = block_backward(cache, p, cfg, r);
        detail::GradSweep s(report, "block", [&] { return detail::dot(block_forward(x, p, cfg).data(), r.data()); });
        s.check("input", x.data(), g.input.data());
        auto pr = p.refs("");
        auto gr = g.params.refs("");
        for (std::size_t i = 0; i < pr.size(); ++i) s.check(pr[i].name, pr[i].values, gr[i].values);
    }
    {
        MicroConfig cfg;
        cfg.image = 8;
        cfg.patch = 2;
        cfg.stem_kernel = 4;
        cfg.channels = 4;
        cfg.blocks = 2;
        cfg.kernel = 3;
        cfg.classes = 3;
        cfg.expansion = 2;
        auto p = MicroParams<double>::init(cfg, rng);
        for (auto& v : p.head_w.data()) v = rng.uniform(-0.5, 0.5);
        for (auto& v : p.embed_w.data()) v = rng.uniform(-1.0, 1.0);
        for (auto& v : p.embed_b) v = rng.uniform(-1.0, 1.0);
        const auto x = random_tensor<double>({2, 1, 8, 8}, rng, 0.0, 1.0);
        const std::vector<std::uint8_t> labels = {2, 0};
        MicroCache<double> cache;
        const auto logits = micro_forward(x, p, cfg, &cache);
        const auto ce = cross_entropy<double>(logits, labels, cfg.classes);
        auto g = micro_backward(cache, p, cfg, CSpan<double>(ce.d_logits));
        detail::GradSweep s(report, "micro", [&] {
            return double(cross_entropy<double>(micro_forward(x, p, cfg), labels, cfg.classes).loss);
        });
        auto pr = p.refs();
        auto gr = g.refs();
        for (std::size_t i = 0; i < pr.size(); ++i) s.check(pr[i].name, pr[i].values, gr[i].values);
    }
    return report;
}

} // namespace atconv
