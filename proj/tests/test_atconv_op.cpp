#include <gtest/gtest.h>

#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "atconv/atconv.hpp"
#include "atconv_checks.hpp"
#include "test_support.hpp"

using namespace atconv;
using atconv::test::depthwise_oracle;

namespace {

ATConvParams<double> random_params(std::size_t c, std::size_t k, Rng& rng) {
    auto p = ATConvParams<double>::init(c, k, rng);
    for (auto* v : {&p.w_f_bias, &p.w_value_bias, &p.w_out_bias, &p.gamma}) {
        for (auto& x : *v) x = rng.uniform(-0.5, 0.5);
    }
    return p;
}

Tensor4<double> kernels_from_matrix(const Matrix<double>& m, std::size_t k) {
    Tensor4<double> t(1, m.rows(), k, k);
    std::copy(m.data().begin(), m.data().end(), t.data().begin());
    return t;
}

Matrix<double> center_delta(std::size_t c, std::size_t k) {
    Matrix<double> m(c, k * k);
    for (std::size_t i = 0; i < c; ++i) m(i, (k / 2) * k + k / 2) = 1.0;
    return m;
}

/// C2K by explicit loops with its own window arithmetic and the series GELU.
Tensor4<double> c2k_oracle(const Tensor4<double>& x, const ATConvParams<double>& p) {
    const auto& s = x.shape();
    const std::size_t k = p.kernel;
    Tensor4<double> raw(s.b, s.c, k, k);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            std::vector<double> z(k * k);
            for (std::size_t i = 0; i < k; ++i) {
                const auto h0 = static_cast<std::size_t>(std::floor(double(i * s.h) / double(k)));
                const auto h1 = static_cast<std::size_t>(std::ceil(double((i + 1) * s.h) / double(k)));
                for (std::size_t j = 0; j < k; ++j) {
                    const auto w0 = static_cast<std::size_t>(std::floor(double(j * s.w) / double(k)));
                    const auto w1 = static_cast<std::size_t>(std::ceil(double((j + 1) * s.w) / double(k)));
                    double sum = 0.0;
                    for (std::size_t h = h0; h < h1; ++h)
                        for (std::size_t w = w0; w < w1; ++w) {
                            double f = p.w_f_bias[c];
                            for (std::size_t ci = 0; ci < s.c; ++ci) f += p.w_f(c, ci) * x(b, ci, h, w);
                            sum += f;
                        }
                    z[i * k + j] = atconv::test::gelu_oracle(sum / double((h1 - h0) * (w1 - w0)));
                }
            }
            for (std::size_t r = 0; r < k * k; ++r) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k * k; ++j) acc += p.w_gen(r, j) * z[j];
                raw(b, c, r / k, r % k) = acc;
            }
        }
    }
    return raw;
}

/// Jacobian d alpha / d raw of one (b, c) slice, assembled from one-hot backward passes.
std::vector<double> dkm_jacobian(std::size_t k, double lambda, Rng& rng) {
    const auto raw = random_tensor<double>({1, 1, k, k}, rng);
    const std::vector<double> lam = {lambda};
    const std::size_t n = k * k;
    std::vector<double> jac(n * n);
    for (std::size_t out = 0; out < n; ++out) {
        Tensor4<double> up(raw.shape());
        up[out] = 1.0;
        const auto g = dkm_backward<double>(raw, lam, up);
        for (std::size_t in = 0; in < n; ++in) jac[out * n + in] = g.raw[in];
    }
    return jac;
}

} // namespace

// ---------------------------------------------------------------- c2k

TEST(C2K, ConstantInputGivesIdenticalTaps) {
    auto p = ATConvParams<double>::zeros(2, 3);
    p.w_f = Matrix<double>::identity(2);
    p.w_gen = Matrix<double>::identity(9);
    const Tensor4<double> x(1, 2, 6, 7, 0.8);
    const auto raw = c2k(x, p);
    for (double v : raw.data()) EXPECT_NEAR(v, gelu(0.8), 1e-15);
}

TEST(C2K, PoolingIdentityWhenSpatialEqualsKernel) {
    Rng rng(10);
    auto p = ATConvParams<double>::zeros(3, 3);
    p.w_f = Matrix<double>::identity(3);
    p.w_gen = Matrix<double>::identity(9);
    const auto x = random_tensor<double>({2, 3, 3, 3}, rng);
    const auto raw = c2k(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(raw[i], gelu(x[i]), 1e-15);
}

TEST(C2K, MatchesScalarPipelineOracle) {
    Rng rng(11);
    const auto p = random_params(2, 3, rng);
    const auto x = random_tensor<double>({1, 2, 5, 5}, rng);
    EXPECT_LT(max_abs_diff(c2k(x, p), c2k_oracle(x, p)), 1e-10);
}

TEST(C2K, RejectsInputSmallerThanKernel) {
    Rng rng(12);
    const auto p = random_params(2, 5, rng);
    EXPECT_THROW(c2k(Tensor4<double>(1, 2, 4, 8), p), DimensionError);
    EXPECT_THROW(c2k(Tensor4<double>(1, 3, 8, 8), p), DimensionError);
}

// ---------------------------------------------------------------- modulation

TEST(DKM, ZeroStrengthIsIdentity) {
    Rng rng(13);
    const auto raw = random_tensor<double>({2, 3, 3, 3}, rng);
    EXPECT_EQ(dkm_with_lambda<double>(raw, std::vector<double>(3, 0.0)).alpha.data(), raw.data());
}

TEST(DKM, FullStrengthOnConstantKernelIsZero) {
    const Tensor4<double> raw(1, 2, 3, 3, 1.0);
    const auto k = dkm_with_lambda<double>(raw, std::vector<double>(2, 1.0));
    for (double v : k.alpha.data()) EXPECT_EQ(v, 0.0);
}

TEST(DKM, GammaPathUsesSigmoid) {
    Rng rng(14);
    const auto raw = random_tensor<double>({1, 2, 3, 3}, rng);
    const std::vector<double> gamma = {0.3, -1.2};
    const auto a = dkm<double>(raw, gamma);
    const auto b = dkm_with_lambda<double>(raw, std::vector<double>{sigmoid(0.3), sigmoid(-1.2)});
    EXPECT_EQ(a.alpha.data(), b.alpha.data());
}

TEST(DKM, JacobianAtHalfStrengthMatchesClosedForm) {
    Rng rng(15);
    const auto jac = dkm_jacobian(3, 0.5, rng);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(jac[i * 9 + j], i == j ? 1.0 - 0.5 / 9.0 : -0.5 / 9.0, 1e-12);
    EXPECT_NEAR(jac[0], 0.9444444444444444, 1e-12);
    EXPECT_NEAR(jac[1], -0.0555555555555556, 1e-12);
}

TEST(DKM, JacobianPropertyOverKernelSizesAndStrengths) {
    Rng rng(16);
    for (std::size_t k : {1u, 3u, 5u}) {
        for (int draw = 0; draw < 20; ++draw) {
            const double lambda = rng.uniform(1e-6, 1.0 - 1e-6);
            const auto jac = dkm_jacobian(k, lambda, rng);
            const std::size_t n = k * k;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double expected = (i == j ? 1.0 : 0.0) - lambda / double(n);
                    ASSERT_NEAR(jac[i * n + j], expected, 1e-12);
                    if (i != j) {
                        ASSERT_LT(jac[i * n + j], 0.0);
                    }
                }
        }
    }
}

TEST(DKM, RaisingOneEntryLowersEveryOtherEntry) {
    Rng rng(17);
    const auto raw = random_tensor<double>({1, 1, 3, 3}, rng);
    const std::vector<double> lam = {0.7};
    const auto base = dkm_with_lambda<double>(raw, lam).alpha;
    for (std::size_t t = 0; t < 9; ++t) {
        auto bumped = raw;
        bumped[t] += 0.25;
        const auto a = dkm_with_lambda<double>(bumped, lam).alpha;
        for (std::size_t o = 0; o < 9; ++o)
            if (o != t) {
                EXPECT_LT(a[o], base[o]);
            }
    }
}

TEST(SoftmaxMod, UniformNonNegativeAndPositive) {
    const Tensor4<double> flat(1, 2, 3, 3, -4.0);
    const auto uniform = kernel_mod_softmax(flat);
    for (double v : uniform.alpha.data()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);

    Rng rng(18);
    auto raw = random_tensor<double>({2, 3, 3, 3}, rng, -5.0, 5.0);
    const auto k = kernel_mod_softmax(raw);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            const auto s = k.alpha.plane(b, c);
            EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-10);
            for (double v : s) EXPECT_GE(v, 0.0);
        }

    for (auto& v : raw.data()) v = -std::abs(v);
    const auto neg = kernel_mod_softmax(raw);
    EXPECT_GT(*std::min_element(neg.alpha.data().begin(), neg.alpha.data().end()), 0.0);
}

TEST(CentralDiff, CenterDeltaCancels) {
    Tensor4<double> raw(1, 1, 3, 3);
    raw(0, 0, 1, 1) = 2.5;
    const auto k = kernel_mod_central_diff(raw);
    for (double v : k.alpha.data()) EXPECT_EQ(v, 0.0);
    Rng rng(19);
    const auto y = dyn_depthwise(random_tensor<double>({1, 1, 5, 5}, rng), k);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(CentralDiff, MatchesHandFormulaAndSumsToZero) {
    Rng rng(20);
    const auto raw = random_tensor<double>({2, 2, 3, 3}, rng);
    const auto k = kernel_mod_central_diff(raw);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 2; ++c) {
            double sum = 0.0;
            for (double v : raw.plane(b, c)) sum += v;
            for (std::size_t t = 0; t < 9; ++t) {
                const double expected = t == 4 ? raw.plane(b, c)[4] - sum : raw.plane(b, c)[t];
                EXPECT_NEAR(k.alpha.plane(b, c)[t], expected, 1e-12);
            }
            const auto a = k.alpha.plane(b, c);
            EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-12);
        }
    EXPECT_THROW(kernel_mod_central_diff(Tensor4<double>(1, 1, 1, 1)), UnsupportedError);
}

// ---------------------------------------------------------------- value projection

TEST(ValueProj, IdentityRankOneAndAliasing) {
    Rng rng(21);
    const auto x = random_tensor<double>({2, 3, 4, 4}, rng);
    const std::vector<double> zero(3, 0.0);
    EXPECT_EQ(value_proj<double>(x, Matrix<double>::identity(3), zero).data(), x.data());

    Matrix<double> rank1(3, 3);
    const std::vector<double> u = {1.0, -2.0, 0.5}, v = {0.3, 0.1, -0.7};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) rank1(i, j) = u[i] * v[j];
    const auto y = value_proj<double>(x, rank1, zero);
    for (std::size_t p = 0; p < 16; ++p) {
        EXPECT_NEAR(y.plane(0, 1)[p], -2.0 * y.plane(0, 0)[p], 1e-14);
        EXPECT_NEAR(y.plane(1, 2)[p], 0.5 * y.plane(1, 0)[p], 1e-14);
    }

    const auto w = random_matrix<double>(3, 3, rng);
    const auto bias = random_vector<double>(3, rng);
    EXPECT_EQ(value_proj<double>(x, w, bias).data(), conv1x1<double>(x, w, bias).data());
    EXPECT_THROW(value_proj<double>(x, Matrix<double>(3, 2), zero), DimensionError);
}

// ---------------------------------------------------------------- dynamic depthwise

TEST(DynDepthwise, CenterDeltaIsIdentityIncludingBorders) {
    Rng rng(22);
    const auto v = random_tensor<double>({2, 3, 5, 4}, rng);
    DynamicKernel<double> k{Tensor4<double>(2, 3, 3, 3)};
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) k.alpha(b, c, 1, 1) = 1.0;
    EXPECT_EQ(dyn_depthwise(v, k).data(), v.data());
}

TEST(DynDepthwise, ZeroValuesGiveZero) {
    Rng rng(23);
    DynamicKernel<double> k{random_tensor<double>({1, 2, 3, 3}, rng)};
    const auto y = dyn_depthwise(Tensor4<double>(1, 2, 4, 4), k);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(DynDepthwise, DirectSummationOnOneToNine) {
    Tensor4<double> v(1, 1, 3, 3);
    std::iota(v.data().begin(), v.data().end(), 1.0);
    const DynamicKernel<double> k{Tensor4<double>(1, 1, 3, 3, 1.0)};
    const auto y = dyn_depthwise(v, k);
    EXPECT_EQ(y(0, 0, 1, 1), 45.0);
    EXPECT_EQ(y(0, 0, 0, 0), 12.0);
    EXPECT_EQ(y(0, 0, 2, 2), 28.0);
}

TEST(DynDepthwise, NoKernelFlip) {
    // A single off-center tap at (u, v) = (0, 0) reads V[h-1, w-1].
    Rng rng(24);
    const auto v = random_tensor<double>({1, 1, 4, 4}, rng);
    DynamicKernel<double> k{Tensor4<double>(1, 1, 3, 3)};
    k.alpha(0, 0, 0, 0) = 1.0;
    const auto y = dyn_depthwise(v, k);
    EXPECT_EQ(y(0, 0, 2, 3), v(0, 0, 1, 2));
    EXPECT_EQ(y(0, 0, 0, 1), 0.0);
}

TEST(DynDepthwise, RejectsEvenKernelsAndMismatch) {
    EXPECT_THROW(dyn_depthwise(Tensor4<double>(1, 1, 4, 4), DynamicKernel<double>{Tensor4<double>(1, 1, 2, 2)}),
                 ArgumentError);
    EXPECT_THROW(dyn_depthwise(Tensor4<double>(1, 2, 4, 4), DynamicKernel<double>{Tensor4<double>(1, 1, 3, 3)}),
                 DimensionError);
}

TEST(DynDepthwise, MatchesLoopOracle) {
    Rng rng(25);
    const auto v = random_tensor<double>({2, 3, 7, 6}, rng);
    const DynamicKernel<double> k{random_tensor<double>({2, 3, 5, 5}, rng)};
    EXPECT_LT(max_abs_diff(dyn_depthwise(v, k), depthwise_oracle(v, k.alpha)), 1e-12);
}

// ---------------------------------------------------------------- full operator

TEST(ATConvForward, IdentityComposition) {
    Rng rng(26);
    const auto p = random_params(3, 3, rng);
    const auto cfg = ATConvConfig<double>::static_depthwise(center_delta(3, 3));
    const auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    EXPECT_EQ(atconv_forward(x, p, cfg).data(), x.data());
}

TEST(ATConvForward, StaticConfigIsPlainDepthwiseConv) {
    Rng rng(27);
    const auto p = random_params(3, 3, rng);
    const auto sk = random_matrix<double>(3, 9, rng);
    const auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    const auto y = atconv_forward(x, p, ATConvConfig<double>::static_depthwise(sk));
    EXPECT_LT(max_abs_diff(y, depthwise_oracle(x, kernels_from_matrix(sk, 3))), 1e-12);
}

TEST(ATConvForward, FrozenKernelDecomposition) {
    Rng rng(28);
    const auto p = random_params(4, 3, rng);
    const auto x = random_tensor<double>({2, 4, 8, 8}, rng);
    const auto alpha = dkm<double>(c2k(x, p), p.gamma).alpha;
    const auto v = conv1x1<double>(x, p.w_value, p.w_value_bias);
    const auto expected = conv1x1<double>(depthwise_oracle(v, alpha), p.w_out, p.w_out_bias);
    EXPECT_LT(max_abs_diff(atconv_forward(x, p, ATConvConfig<double>::full()), expected), 1e-12);
}

TEST(ATConvForward, ConfigValidation) {
    Rng rng(29);
    const auto p = random_params(2, 3, rng);
    const Tensor4<double> x(1, 2, 5, 5);
    ATConvConfig<double> cfg;
    cfg.static_kernel = Matrix<double>(2, 9);
    EXPECT_THROW(atconv_forward(x, p, cfg), ArgumentError);
    cfg = ATConvConfig<double>::full();
    cfg.use_kernel_generator = false;
    EXPECT_THROW(atconv_forward(x, p, cfg), ArgumentError);
    EXPECT_THROW(atconv_forward(Tensor4<double>(1, 3, 5, 5), p, ATConvConfig<double>::full()), DimensionError);

    const auto p1 = random_params(2, 1, rng);
    cfg = ATConvConfig<double>::full();
    cfg.kernel_mod = KernelMod::central_diff;
    EXPECT_THROW(atconv_forward(x, p1, cfg), UnsupportedError);
    EXPECT_THROW(ATConvParams<double>::zeros(2, 4), ArgumentError);
}

TEST(ATConvForward, ZeroSumSuppressionOnConstantInput) {
    Rng rng(30);
    auto p = random_params(4, 3, rng);
    p.w_out_bias.assign(4, 0.0);
    auto cfg = ATConvConfig<double>::full();
    cfg.lambda_override = std::vector<double>(4, 1.0);
    const Tensor4<double> x(2, 4, 9, 9, 1.7);
    const auto y = atconv_forward(x, p, cfg);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t h = 1; h < 8; ++h)
                for (std::size_t w = 1; w < 8; ++w) EXPECT_LT(std::abs(y(b, c, h, w)), 1e-8);
}

TEST(ATConvForward, RoadmapStagesAreReachable) {
    Rng rng(31);
    const auto p = random_params(3, 3, rng);
    const auto sk = random_matrix<double>(3, 9, rng);
    const auto x = random_tensor<double>({1, 3, 6, 6}, rng);
    const auto stages = roadmap_stages();
    ASSERT_EQ(stages.size(), 7u);
    for (const auto& stage : stages) {
        const auto cfg = make_config(stage, sk);
        EXPECT_EQ(atconv_forward(x, p, cfg).shape(), x.shape()) << stage.name;
    }
    const auto first = atconv_forward(x, p, make_config(stages.front(), sk));
    EXPECT_LT(max_abs_diff(first, depthwise_oracle(x, kernels_from_matrix(sk, 3))), 1e-12);
}

TEST(ATConvForward, GlobalContextReachesLocalKernels) {
    // Two inputs that agree on the 3x3 neighborhood of (2, 2) but differ far away.
    Rng rng(32);
    const auto p = random_params(3, 3, rng);
    const auto x1 = random_tensor<double>({1, 3, 8, 8}, rng);
    auto x2 = x1;
    for (std::size_t c = 0; c < 3; ++c) x2(0, c, 7, 7) += 1.5;
    const auto k1 = atconv_kernel(x1, p, ATConvConfig<double>::full());
    const auto k2 = atconv_kernel(x2, p, ATConvConfig<double>::full());
    EXPECT_GT(max_abs_diff(k1.alpha, k2.alpha), 1e-6);
}

TEST(ATConvForward, TranslationEquivarianceOnlyForStaticKernels) {
    Rng rng(33);
    const auto p = random_params(2, 3, rng);
    const auto sk = random_matrix<double>(2, 9, rng);
    Tensor4<double> x(1, 2, 10, 10);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t h = 2; h < 6; ++h)
            for (std::size_t w = 2; w < 6; ++w) x(0, c, h, w) = rng.uniform(-1.0, 1.0);
    Tensor4<double> shifted(x.shape());
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t h = 0; h + 2 < 10; ++h)
            for (std::size_t w = 0; w + 2 < 10; ++w) shifted(0, c, h + 2, w + 2) = x(0, c, h, w);

    auto shift_out = [](const Tensor4<double>& y) {
        Tensor4<double> out(y.shape());
        for (std::size_t c = 0; c < y.channels(); ++c)
            for (std::size_t h = 0; h + 2 < y.height(); ++h)
                for (std::size_t w = 0; w + 2 < y.width(); ++w) out(0, c, h + 2, w + 2) = y(0, c, h, w);
        return out;
    };

    const auto st = ATConvConfig<double>::static_depthwise(sk);
    EXPECT_LT(max_abs_diff(shift_out(atconv_forward(x, p, st)), atconv_forward(shifted, p, st)), 1e-12);

    const auto full = ATConvConfig<double>::full();
    const double deviation = max_abs_diff(shift_out(atconv_forward(x, p, full)), atconv_forward(shifted, p, full));
    RecordProperty("full_config_translation_deviation", std::to_string(deviation));
    std::cout << "full-config translation deviation: " << deviation << "\n";
}

// ---------------------------------------------------------------- backward

TEST(ATConvBackward, StaticKernelJacobianIsKernelAtOffsets) {
    Rng rng(34);
    const std::size_t C = 2;
    auto p = random_params(C, 3, rng);
    p.w_value = Matrix<double>::identity(C);
    p.w_out = Matrix<double>::identity(C);
    const auto sk = random_matrix<double>(C, 9, rng);
    ATConvConfig<double> cfg;
    cfg.use_kernel_generator = false;
    cfg.static_kernel = sk;
    cfg.kernel_mod = KernelMod::dkm;
    cfg.lambda_override = std::vector<double>(C, 0.0);
    const auto x = random_tensor<double>({1, C, 7, 7}, rng);
    ATConvCache<double> cache;
    atconv_forward(x, p, cfg, &cache);
    const std::size_t hs = 3, ws = 4;
    for (std::size_t co = 0; co < C; ++co) {
        Tensor4<double> up(x.shape());
        up(0, co, hs, ws) = 1.0;
        const auto g = atconv_backward(cache, p, cfg, up);
        for (std::size_t ci = 0; ci < C; ++ci)
            for (std::size_t h = 0; h < 7; ++h)
                for (std::size_t w = 0; w < 7; ++w) {
                    const long du = long(h) - long(hs) + 1;
                    const long dv = long(w) - long(ws) + 1;
                    const bool inside = ci == co && du >= 0 && du < 3 && dv >= 0 && dv < 3;
                    const double expected = inside ? sk(co, std::size_t(du * 3 + dv)) : 0.0;
                    EXPECT_NEAR(g.input(0, ci, h, w), expected, 1e-10);
                }
    }
}

TEST(ATConvBackward, FullOperatorMatchesFiniteDifferences) {
    Rng rng(35);
    const auto p = random_params(3, 3, rng);
    const auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    const auto report = atconv::test::check_atconv_gradients(x, p, ATConvConfig<double>::full(), 77);
    EXPECT_LT(report.worst, 1e-4) << report.worst_name;
}

TEST(ATConvBackward, EveryRoadmapStageMatchesFiniteDifferences) {
    Rng rng(36);
    const auto p = random_params(3, 3, rng);
    const auto sk = random_matrix<double>(3, 9, rng);
    const auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    for (const auto& stage : roadmap_stages()) {
        const auto report = atconv::test::check_atconv_gradients(x, p, make_config(stage, sk), 78);
        EXPECT_LT(report.worst, 1e-4) << stage.name << " / " << report.worst_name;
    }
}

TEST(ATConvBackward, KernelSizeFiveAndOddShapes) {
    Rng rng(37);
    const auto p = random_params(2, 5, rng);
    const auto x = random_tensor<double>({1, 2, 7, 6}, rng);
    const auto report = atconv::test::check_atconv_gradients(x, p, ATConvConfig<double>::full(), 79);
    EXPECT_LT(report.worst, 1e-4) << report.worst_name;
}

TEST(ATConvBackward, GammaGradientVanishesForZeroMeanKernels) {
    Rng rng(38);
    const auto p = random_params(3, 3, rng);
    auto sk = random_matrix<double>(3, 9, rng);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < 9; ++t) mean += sk(c, t) / 9.0;
        for (std::size_t t = 0; t < 9; ++t) sk(c, t) -= mean;
    }
    ATConvConfig<double> cfg = ATConvConfig<double>::full();
    cfg.use_kernel_generator = false;
    cfg.static_kernel = sk;
    const auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    ATConvCache<double> cache;
    atconv_forward(x, p, cfg, &cache);
    const auto g = atconv_backward(cache, p, cfg, random_tensor<double>(x.shape(), rng));
    for (double v : g.gamma) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(ATConvBackward, MissingCacheIsStateError) {
    Rng rng(39);
    const auto p = random_params(2, 3, rng);
    EXPECT_THROW(atconv_backward(ATConvCache<double>{}, p, ATConvConfig<double>::full(), Tensor4<double>(1, 2, 4, 4)),
                 StateError);
}

// ---------------------------------------------------------------- parameters

TEST(ATConvParams, InitializationFollowsDocumentedRanges) {
    Rng rng(40);
    const auto p = ATConvParams<double>::init(16, 3, rng);
    const double bound = std::sqrt(1.0 / 16.0);
    for (const auto* m : {&p.w_f, &p.w_value, &p.w_out})
        for (double v : m->data()) EXPECT_LE(std::abs(v), bound);
    for (std::size_t r = 0; r < 9; ++r)
        for (std::size_t c = 0; c < 9; ++c) EXPECT_NEAR(p.w_gen(r, c), r == c ? 1.0 : 0.0, 0.01);
    for (double g : p.gamma) EXPECT_EQ(sigmoid(g), 0.5);
}

TEST(ATConvParams, CheckpointRoundTripUsesCanonicalNames) {
    Rng rng(41);
    const auto p = random_params(3, 3, rng);
    std::stringstream ss;
    write_atck(ss, to_atck(p));
    const auto entries = read_atck(ss);
    std::vector<std::string> names;
    for (const auto& e : entries) names.push_back(e.name);
    EXPECT_EQ(names, (std::vector<std::string>{"w_f", "w_f_bias", "w_gen", "gamma", "w_value", "w_value_bias",
                                               "w_out", "w_out_bias"}));
    const auto q = atconv_params_from_atck<double>(entries);
    EXPECT_EQ(q.w_gen, p.w_gen);
    EXPECT_EQ(q.gamma, p.gamma);
    EXPECT_EQ(q.w_out_bias, p.w_out_bias);
}

TEST(ATConvParams, ParamCountPerStage) {
    const auto p = ATConvParams<double>::zeros(8, 3);
    const Matrix<double> sk(8, 9);
    std::vector<std::size_t> counts;
    for (const auto& stage : roadmap_stages()) counts.push_back(param_count(p, make_config(stage, sk)));
    EXPECT_EQ(counts[0], 8u * 9u);
    EXPECT_EQ(counts[1], 64u + 8u + 81u);
    EXPECT_EQ(counts[2], counts[1] + 72u);
    EXPECT_EQ(counts[3], counts[2] + 72u);
    EXPECT_EQ(counts[4], counts[3]);
    EXPECT_EQ(counts[5], counts[3]);
    EXPECT_EQ(counts[6], counts[3] + 8u);
}
